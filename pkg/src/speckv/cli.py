"""Thin-client CLI: every subcommand calls the FastAPI service.

Without --server the app runs in-process; with --server the same requests
go to a remote instance. Output is the report JSON, or the rows as CSV.
"""
from __future__ import annotations

import csv
import io
import json
import sys

import click
import httpx


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=300.0)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .api import app
    return TestClient(app)


def _call(ctx, method: str, path: str, payload: dict | None = None) -> dict:
    with _client(ctx.obj.get("server")) as client:
        resp = client.post(path, json=payload) if method == "post" else client.get(path)
    if resp.status_code >= 400:
        raise click.ClickException(f"{path} failed ({resp.status_code}): {resp.text}")
    return resp.json()


def _emit(report: dict, as_csv: bool, out: str | None) -> None:
    if as_csv:
        rows = report.get("rows", [])
        buf = io.StringIO()
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        text = buf.getvalue()
    else:
        text = json.dumps(report, indent=2) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _format_options(fn):
    fn = click.option("--json", "as_json", flag_value=True, default=True,
                      help="Emit the full report as JSON (default).")(fn)
    fn = click.option("--csv", "as_csv", is_flag=True, default=False,
                      help="Emit the report rows as CSV.")(fn)
    fn = click.option("--out", default=None, help="Write output to a file.")(fn)
    return fn


@click.group()
@click.option("--server", default=None, envvar="SPECKV_SERVER",
              help="Base URL of a running speckv service; default runs in-process.")
@click.pass_context
def main(ctx, server):
    """Two-tier KV cache decoding engine with speculative top-k prefetch."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command("gen-weights")
@click.argument("path")
@click.option("--seed", default=0, type=int)
@click.option("--layers", default=2, type=int)
@click.option("--q-heads", default=4, type=int)
@click.option("--kv-heads", default=2, type=int)
@click.option("--head-dim", default=8, type=int)
@click.option("--vocab", default=64, type=int)
@click.option("--hidden", default=32, type=int)
@click.option("--ffn", default=64, type=int)
@click.pass_context
def gen_weights(ctx, path, seed, layers, q_heads, kv_heads, head_dim, vocab, hidden, ffn):
    """Generate a seeded weight file."""
    resp = _call(ctx, "post", "/gen-weights", {
        "path": path, "seed": seed, "layers": layers, "q_heads": q_heads,
        "kv_heads": kv_heads, "head_dim": head_dim, "vocab": vocab,
        "hidden": hidden, "ffn": ffn,
    })
    sys.stdout.write(json.dumps(resp, indent=2) + "\n")


@main.command()
@click.argument("weights_path")
@click.option("--prompt", default=None, help="Comma-separated token ids.")
@click.option("--prompt-len", default=32, type=int)
@click.option("--steps", default=32, type=int)
@click.option("--bits", default=2, type=click.Choice(["1", "2", "4", "16"]))
@click.option("--g", "group_size", default=32, type=int)
@click.option("--k", default=64, type=int)
@click.option("--residual", default=64, type=int)
@click.option("--bandwidth", default=16e9, type=float)
@click.option("--alpha", default=5.0, type=float)
@click.option("--overhead", default=0.0, type=float)
@click.option("--compute-s", default=0.0, type=float)
@click.option("--mode", default="sim", type=click.Choice(["sim", "thread"]))
@click.option("--seed", default=0, type=int)
@click.option("--max-len", default=4096, type=int)
@_format_options
@click.pass_context
def decode(ctx, weights_path, prompt, prompt_len, steps, bits, group_size, k,
           residual, bandwidth, alpha, overhead, compute_s, mode, seed,
           max_len, as_json, as_csv, out):
    """Run a speculative two-tier decode and report per-step metrics."""
    prompt_ids = [int(t) for t in prompt.split(",")] if prompt else None
    report = _call(ctx, "post", "/decode", {
        "weights_path": weights_path, "prompt": prompt_ids, "prompt_len": prompt_len,
        "steps": steps, "bits": int(bits), "group_size": group_size, "k": k,
        "residual": residual, "bandwidth": bandwidth, "alpha": alpha,
        "overhead": overhead, "compute_s": compute_s, "mode": mode,
        "seed": seed, "max_len": max_len,
    })
    _emit(report, as_csv, out)


@main.command()
@click.argument("weights_path")
@click.option("--prompt", default=None, help="Comma-separated token ids.")
@click.option("--prompt-len", default=32, type=int)
@click.option("--steps", default=32, type=int)
@click.option("--k-sweep", default="1,4,16,64", help="Comma-separated k values.")
@click.option("--seed", default=0, type=int)
@_format_options
@click.pass_context
def hitrate(ctx, weights_path, prompt, prompt_len, steps, k_sweep, seed,
            as_json, as_csv, out):
    """Top-k vs greedy-eviction hit-rate curves from a traced decode."""
    prompt_ids = [int(t) for t in prompt.split(",")] if prompt else None
    report = _call(ctx, "post", "/hitrate", {
        "weights_path": weights_path, "prompt": prompt_ids, "prompt_len": prompt_len,
        "steps": steps, "k_sweep": [int(v) for v in k_sweep.split(",")], "seed": seed,
    })
    _emit(report, as_csv, out)


@main.command()
@click.option("--steps", default=16, type=int)
@click.option("--context-length", default=32768, type=int)
@click.option("--layers", default=32, type=int)
@click.option("--kv-heads", default=8, type=int)
@click.option("--head-dim", default=128, type=int)
@click.option("--k", default=64, type=int)
@click.option("--bandwidth", default=16e9, type=float)
@click.option("--alpha", default=5.0, type=float)
@click.option("--overhead", default=0.0, type=float)
@click.option("--compute-s", default=0.02, type=float)
@_format_options
@click.pass_context
def latency(ctx, steps, context_length, layers, kv_heads, head_dim, k,
            bandwidth, alpha, overhead, compute_s, as_json, as_csv, out):
    """Overlapped vs serialized prefetch latency model."""
    report = _call(ctx, "post", "/latency", {
        "steps": steps, "context_length": context_length, "layers": layers,
        "kv_heads": kv_heads, "head_dim": head_dim, "k": k,
        "bandwidth": bandwidth, "alpha": alpha, "overhead": overhead,
        "compute_s": compute_s,
    })
    _emit(report, as_csv, out)


@main.command("ratio-table")
@_format_options
@click.pass_context
def ratio_table(ctx, as_json, as_csv, out):
    """Resident cache size ratios for the standard configurations."""
    report = _call(ctx, "get", "/ratio-table")
    _emit(report, as_csv, out)


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve(host, port):
    """Run the FastAPI service."""
    import uvicorn

    from .api import app
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
