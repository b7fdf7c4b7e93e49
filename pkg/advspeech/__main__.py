import sys

from advspeech.cli import main

sys.exit(main())
