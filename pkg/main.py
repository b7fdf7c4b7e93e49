from fastapi_pagination import add_pagination

from advspeech.app import app
from advspeech.corpus_apis import router as corpus_apis_router
from advspeech.evaluation_apis import router as evaluation_apis_router


@app.get("/")
async def root():
    return {"message": "Welcome to advspeech!  Navigate to /docs for the evaluation API."}


add_pagination(app)
app.include_router(evaluation_apis_router)
app.include_router(corpus_apis_router)
