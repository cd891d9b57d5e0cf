"""HTTP scoring service exposing a classifier (optionally defended) as a black-box oracle.

    uvicorn refinelab.service:app   # with REFINELAB_MODEL=/path/model.ckpt

or `refinelab serve --model model.ckpt [--defense defense.ckpt]`.
"""

from __future__ import annotations

import os

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .classifier import Classifier, load_classifier, predict_probs
from .refine import DefendedModel, defended_predict, load_defense


class ScoreRequest(BaseModel):
    shape: list[int] = Field(..., min_length=4, max_length=4, description="[n, h, w, c]")
    images: list[float]


class ScoreResponse(BaseModel):
    probs: list[list[float]]


class InfoResponse(BaseModel):
    num_classes: int
    input_shape: list[int]
    batch_limit: int
    defended: bool


def create_app(model: Classifier, defense: DefendedModel | None = None, batch_limit: int = 256) -> FastAPI:
    app = FastAPI(title="refinelab scoring oracle")

    @app.get("/info", response_model=InfoResponse)
    def info():
        return InfoResponse(num_classes=model.num_classes, input_shape=list(model.input_shape),
                            batch_limit=batch_limit, defended=defense is not None)

    @app.post("/score", response_model=ScoreResponse)
    def score(req: ScoreRequest):
        n, h, w, c = req.shape
        if [h, w, c] != list(model.input_shape):
            raise HTTPException(422, f"image dims {[h, w, c]} differ from model dims {list(model.input_shape)}")
        if n > batch_limit:
            raise HTTPException(413, f"batch of {n} exceeds limit {batch_limit}")
        if len(req.images) != n * h * w * c:
            raise HTTPException(422, "images length does not match shape")
        x = np.asarray(req.images, dtype=np.float32).reshape(n, h, w, c)
        if n and (x.min() < 0 or x.max() > 1):
            raise HTTPException(422, "pixel values must lie in [0, 1]")
        probs = defended_predict(defense, x)[1] if defense else predict_probs(model, x)
        return ScoreResponse(probs=probs.tolist())

    return app


def app_from_paths(model_path: str, defense_path: str | None = None, batch_limit: int = 256) -> FastAPI:
    model, _ = load_classifier(model_path)
    defense = None
    if defense_path:
        module, mapping, _ = load_defense(defense_path)
        defense = DefendedModel(module, model, mapping)
    return create_app(model, defense, batch_limit)


def __getattr__(name):
    # lazy module-level `app` for `uvicorn refinelab.service:app`
    if name == "app":
        return app_from_paths(os.environ["REFINELAB_MODEL"], os.environ.get("REFINELAB_DEFENSE"),
                              int(os.environ.get("REFINELAB_BATCH_LIMIT", "256")))
    raise AttributeError(name)
