"""Checkpoint directory format.

A checkpoint is a directory holding:

    config.json              model shape and quantization parameters
    <tensor>.epws            one packed-stream container per projection
    aux.npz                  binary16 sidecar: embedding table, norm gains

Projection tensors are stored quantized; loading preserves their codes
bit for bit, so a checkpoint round-trip never re-quantizes. The embedding
and the norm gains stay in binary16 (they are read element-wise, not
streamed through the dot engine).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig, tiny_demo_config
from .errors import FormatError, ShapeError
from .layout import GroupedTensor, pack_tensor, read_container, unpack_stream, write_container

AUX_NAME = "aux.npz"
CONFIG_NAME = "config.json"

LAYER_TENSORS = ("attn.q", "attn.k", "attn.v", "attn.o",
                 "mlp.gate", "mlp.up", "mlp.down")


def tensor_names(cfg: ModelConfig) -> list[str]:
    names = [f"layers.{i}.{t}" for i in range(cfg.n_layers) for t in LAYER_TENSORS]
    names.append("lm_head")
    return names


def tensor_shape(cfg: ModelConfig, name: str) -> tuple[int, int]:
    if name == "lm_head":
        return (cfg.vocab_size, cfg.d_model)
    short = name.split(".", 2)[2]
    return cfg.projection_shapes()[short]


def norm_names(cfg: ModelConfig) -> list[str]:
    names = []
    for i in range(cfg.n_layers):
        names += [f"attn.{i}", f"mlp.{i}"]
    names.append("final")
    return names


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, GroupedTensor]
    embedding: np.ndarray            # (vocab, d_model) float16
    norms: dict[str, np.ndarray]     # name -> (d_model,) float16

    def validate(self) -> None:
        cfg = self.config
        for name in tensor_names(cfg):
            if name not in self.tensors:
                raise FormatError(f"checkpoint is missing tensor {name!r}")
            t = self.tensors[name]
            want = tensor_shape(cfg, name)
            if (t.rows, t.cols) != want:
                raise ShapeError(f"{name}: shape ({t.rows}, {t.cols}) != {want}")
            if t.group_size != cfg.group_size:
                raise FormatError(
                    f"{name}: group size {t.group_size} != config {cfg.group_size}")
        if self.embedding.shape != (cfg.vocab_size, cfg.d_model):
            raise ShapeError(f"embedding shape {self.embedding.shape} is wrong")
        if self.embedding.dtype != np.float16:
            raise FormatError("embedding must be binary16")
        for name in norm_names(cfg):
            g = self.norms.get(name)
            if g is None or g.shape != (cfg.d_model,) or g.dtype != np.float16:
                raise FormatError(f"norm gain {name!r} missing or malformed")


def save_checkpoint(ckpt: Checkpoint, dirpath: str | Path) -> None:
    ckpt.validate()
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    ckpt.config.to_json(d / CONFIG_NAME)
    for name, tensor in ckpt.tensors.items():
        write_container(pack_tensor(tensor), d / f"{name}.epws")
    aux = {"embedding": ckpt.embedding}
    aux.update({f"norm.{k}": v for k, v in ckpt.norms.items()})
    np.savez(d / AUX_NAME, **aux)


def load_checkpoint(dirpath: str | Path) -> Checkpoint:
    d = Path(dirpath)
    cfg_path = d / CONFIG_NAME
    if not cfg_path.exists():
        raise FileNotFoundError(f"{cfg_path} does not exist")
    cfg = ModelConfig.from_json(cfg_path)
    tensors = {}
    for name in tensor_names(cfg):
        path = d / f"{name}.epws"
        if not path.exists():
            raise FileNotFoundError(f"{path} does not exist")
        tensors[name] = unpack_stream(read_container(path))
    with np.load(d / AUX_NAME) as aux:
        embedding = aux["embedding"]
        norms = {k[len("norm."):]: aux[k] for k in aux.files if k.startswith("norm.")}
    ckpt = Checkpoint(config=cfg, tensors=tensors, embedding=embedding, norms=norms)
    ckpt.validate()
    return ckpt


def quantize_checkpoint(cfg: ModelConfig, weights: dict[str, np.ndarray],
                        embedding: np.ndarray, norms: dict[str, np.ndarray]) -> Checkpoint:
    """Quantize a dict of binary16 weight matrices into a checkpoint."""
    tensors = {}
    for name in tensor_names(cfg):
        if name not in weights:
            raise FormatError(f"missing weight matrix {name!r}")
        w = np.asarray(weights[name], dtype=np.float16)
        if w.shape != tensor_shape(cfg, name):
            raise ShapeError(f"{name}: got {w.shape}, want {tensor_shape(cfg, name)}")
        tensors[name] = GroupedTensor.quantize(w, cfg.group_size)
    ckpt = Checkpoint(config=cfg,
                      tensors=tensors,
                      embedding=np.asarray(embedding, dtype=np.float16),
                      norms={k: np.asarray(v, dtype=np.float16) for k, v in norms.items()})
    ckpt.validate()
    return ckpt


def build_demo_checkpoint(seed: int = 0, cfg: ModelConfig | None = None) -> Checkpoint:
    """Deterministic random checkpoint for the demo and the test rigs."""
    cfg = cfg or tiny_demo_config()
    rng = np.random.default_rng(seed)
    weights = {}
    for name in tensor_names(cfg):
        rows, cols = tensor_shape(cfg, name)
        weights[name] = (rng.standard_normal((rows, cols)) / np.sqrt(cols)).astype(np.float16)
    embedding = rng.standard_normal((cfg.vocab_size, cfg.d_model)).astype(np.float16)
    norms = {name: (1.0 + 0.1 * rng.standard_normal(cfg.d_model)).astype(np.float16)
             for name in norm_names(cfg)}
    return quantize_checkpoint(cfg, weights, embedding, norms)
