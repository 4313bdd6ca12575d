from pathlib import Path

import numpy as np
import pytest

from svcmerge.checkpoint import TensorStore, write_checkpoint

SHAPES = {"encoder.attn.weight": (6, 5), "encoder.conv.weight": (2, 3, 4), "encoder.norm.bias": (5,)}


@pytest.fixture
def write_store(tmp_path):
    def _write(name, tensors, metadata=None) -> Path:
        path = tmp_path / f"{name}.safetensors"
        write_checkpoint(TensorStore(tensors, metadata), path)
        return path

    return _write


@pytest.fixture
def checkpoints(write_store):
    """Pre-trained plus two fine-tuned checkpoints; build(...) -> (pre_path, task_paths, pre, finetuned)."""

    def _build(dtype=np.float32, tasks=2, shapes=SHAPES, seed=42, identical=False):
        rng = np.random.default_rng(seed)
        pre = {n: rng.normal(size=s).astype(dtype) for n, s in shapes.items()}
        pre_path = write_store("pre", pre, {"origin": "fixture"})
        paths, fts = [], []
        for t in range(tasks):
            if identical and fts:
                ft = fts[0]
            else:
                ft = {n: (pre[n] + rng.normal(scale=0.1, size=s)).astype(dtype) for n, s in shapes.items()}
            fts.append(ft)
            paths.append(write_store(f"task{t}", ft))
        return pre_path, paths, pre, fts

    return _build
