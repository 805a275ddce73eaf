import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from specfilter.tensorstore import Tensor, write_safetensors  # noqa: E402


def build_checkpoint(path, n_layers=4, d=8, d_ff=16, dtype=np.float32, seed=0, orientation="rows", extra=True):
    """Small LLaMA-shaped checkpoint: down/up projections per layer plus an
    embedding and an integer buffer that must pass through untouched."""
    rng = np.random.default_rng(seed)
    tensors = {}
    if extra:
        tensors["model.embed_tokens.weight"] = Tensor(rng.standard_normal((11, d)).astype(dtype))
    for layer in range(n_layers):
        shape = (d, d_ff) if orientation == "rows" else (d_ff, d)
        tensors[f"model.layers.{layer}.mlp.down_proj.weight"] = Tensor(rng.standard_normal(shape).astype(dtype))
        tensors[f"model.layers.{layer}.mlp.up_proj.weight"] = Tensor(rng.standard_normal((d_ff, d)).astype(dtype))
    if extra:
        tensors["model.position_ids"] = Tensor(np.arange(7, dtype=np.int64))
    write_safetensors(path, tensors, {"format": "pt"})
    return tensors


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "model.safetensors"
    tensors = build_checkpoint(path)
    return path, tensors


def random_psd(rng, d, rank=None):
    a = rng.standard_normal((d, rank or d))
    return a @ a.T


# one line per acceptance criterion, filled in by test_acceptance and echoed
# in the terminal summary so the verdicts survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
