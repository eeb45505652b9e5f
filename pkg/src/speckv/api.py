"""FastAPI service wrapping the decoding engine and experiment harness.

The CLI talks to these endpoints (in-process by default, or a remote
instance via --server). Responses follow the report schema
{experiment, config, rows, summary}.
"""
from __future__ import annotations

import hashlib

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import experiments, model

app = FastAPI(title="speckv", description="Two-tier KV cache decoding service")


class Report(BaseModel):
    experiment: str
    config: dict
    rows: list[dict]
    summary: dict


class GenWeightsRequest(BaseModel):
    path: str
    seed: int = 0
    layers: int = 2
    q_heads: int = 4
    kv_heads: int = 2
    head_dim: int = 8
    vocab: int = 64
    hidden: int = 32
    ffn: int = 64


class GenWeightsResponse(BaseModel):
    path: str
    bytes_written: int
    sha256: str


class DecodeRequest(BaseModel):
    weights_path: str
    prompt: list[int] | None = None
    prompt_len: int = Field(default=32, ge=1)
    steps: int = Field(default=32, ge=1)
    bits: int = 2
    group_size: int = Field(default=32, alias="g")
    k: int = 64
    residual: int = 64
    bandwidth: float = 16e9
    alpha: float = 5.0
    overhead: float = 0.0
    compute_s: float = 0.0
    mode: str = "sim"
    seed: int = 0
    max_len: int = 4096

    model_config = {"populate_by_name": True}


class HitrateRequest(BaseModel):
    weights_path: str
    prompt: list[int] | None = None
    prompt_len: int = Field(default=32, ge=1)
    steps: int = Field(default=32, ge=1)
    k_sweep: list[int] = [1, 4, 16, 64]
    seed: int = 0


class LatencyRequest(BaseModel):
    steps: int = Field(default=16, ge=1)
    context_length: int = 32768
    layers: int = 32
    kv_heads: int = 8
    head_dim: int = 128
    k: int = 64
    bandwidth: float = 16e9
    alpha: float = 5.0
    overhead: float = 0.0
    compute_s: float = 0.02
    byte_schedule: list[int] | None = None


@app.post("/gen-weights", response_model=GenWeightsResponse)
def gen_weights(req: GenWeightsRequest) -> GenWeightsResponse:
    try:
        config = model.DecoderConfig(
            layers=req.layers, q_heads=req.q_heads, kv_heads=req.kv_heads,
            head_dim=req.head_dim, vocab=req.vocab, hidden=req.hidden,
            ffn=req.ffn, seed=req.seed)
        weights = model.init_decoder(config)
        n = model.save_weights(req.path, config, weights)
    except (ValueError, OSError) as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    with open(req.path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    return GenWeightsResponse(path=req.path, bytes_written=n, sha256=digest)


@app.post("/decode", response_model=Report)
def decode(req: DecodeRequest) -> Report:
    try:
        report = experiments.run_decode(
            weights_path=req.weights_path, prompt=req.prompt,
            prompt_len=req.prompt_len, steps=req.steps, bits=req.bits,
            group_size=req.group_size, k=req.k, residual=req.residual,
            bandwidth=req.bandwidth, alpha=req.alpha, overhead=req.overhead,
            compute_s=req.compute_s, mode=req.mode, seed=req.seed,
            max_len=req.max_len)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    except (ValueError, OSError) as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return Report(**report)


@app.post("/hitrate", response_model=Report)
def hitrate(req: HitrateRequest) -> Report:
    try:
        report = experiments.hitrate_experiment(
            weights_path=req.weights_path, prompt=req.prompt,
            prompt_len=req.prompt_len, steps=req.steps,
            k_sweep=req.k_sweep, seed=req.seed)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    except (ValueError, OSError) as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return Report(**report)


@app.post("/latency", response_model=Report)
def latency(req: LatencyRequest) -> Report:
    try:
        report = experiments.latency_experiment(
            steps=req.steps, context_length=req.context_length,
            layers=req.layers, kv_heads=req.kv_heads, head_dim=req.head_dim,
            k=req.k, bandwidth=req.bandwidth, alpha=req.alpha,
            overhead=req.overhead, compute_s=req.compute_s,
            byte_schedule=req.byte_schedule)
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return Report(**report)


@app.get("/ratio-table", response_model=Report)
def ratio_table() -> Report:
    return Report(**experiments.ratio_table())
