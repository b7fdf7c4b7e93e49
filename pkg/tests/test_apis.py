import numpy as np
from fastapi.testclient import TestClient
from main import app

from advspeech.asr import save_asr
from advspeech.corpus import write_corpus

client = TestClient(app)
rng = np.random.default_rng(8)


def test_read_root():
    response = client.get("/")
    assert response.status_code == 200
    assert response.json() == {
        "message": "Welcome to advspeech!  Navigate to /docs for the evaluation API."
    }


def test_health():
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "OK"}


def test_evaluate_identical_signals():
    t = np.arange(16384) / 16000
    samples = (0.2 * (0.6 + 0.4 * np.sin(2 * np.pi * 3.0 * t)) * rng.normal(size=16384)).tolist()
    response = client.post("/evaluate", json={"clean": samples, "degraded": samples})
    assert response.status_code == 200
    body = response.json()
    assert body["snr_infinite"] is True
    assert body["snr_db"] is None
    assert body["pesq"] == 4.5


def test_evaluate_text_only_fields():
    samples = (0.1 * rng.normal(size=16384)).tolist()
    noisy = [s + 0.01 for s in samples]
    response = client.post(
        "/evaluate",
        json={
            "clean": samples,
            "degraded": noisy,
            "reference_text": "call home",
            "hypothesis_text": "call",
            "target_text": "stop",
        },
    )
    assert response.status_code == 200
    body = response.json()
    assert body["wer_pct"] == 50.0
    assert body["rosa_pct"] == 0.0
    assert body["snr_infinite"] is False


def test_evaluate_rejects_mismatched_lengths():
    response = client.post("/evaluate", json={"clean": [0.1] * 100, "degraded": [0.1] * 50})
    assert response.status_code == 400


def test_transcribe_without_a_checkpoint(monkeypatch):
    monkeypatch.delenv("ADVSPEECH_ASR_CHECKPOINT", raising=False)
    response = client.post("/transcribe", json={"samples": [0.0] * 8192})
    assert response.status_code == 503


def test_transcribe(monkeypatch, tmp_path, tiny_asr, tiny_corpus):
    path = save_asr(tiny_asr, tmp_path / "asr.ntv1")
    monkeypatch.setenv("ADVSPEECH_ASR_CHECKPOINT", str(path))
    samples = tiny_corpus.utterances[0].clean.samples.tolist()
    response = client.post("/transcribe", json={"samples": samples})
    assert response.status_code == 200
    assert response.json()["n_samples"] == 8192
    assert isinstance(response.json()["text"], str)


def test_corpus_pages(monkeypatch, tmp_path, tiny_corpus):
    write_corpus(tiny_corpus, tmp_path)
    monkeypatch.setenv("ADVSPEECH_CORPUS_DIR", str(tmp_path))
    response = client.get("/corpus/utterances", params={"page": 2, "size": 2})
    assert response.status_code == 200
    body = response.json()
    assert body["total"] == 3
    assert [u["id"] for u in body["items"]] == ["utt_002"]
    assert body["items"][0]["snr_levels_db"] == [10.0]


def test_corpus_not_configured(monkeypatch):
    monkeypatch.delenv("ADVSPEECH_CORPUS_DIR", raising=False)
    assert client.get("/corpus/utterances").status_code == 503
