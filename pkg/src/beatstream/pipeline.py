"""Fused head-wise decode pipeline with a per-token stage trace.

Two decode paths share every arithmetic primitive:

  Decoder           streams weights head by head in container order,
                    carries the residual's sum of squares into the next
                    norm, applies rotary position on the fly, and logs a
                    cycle trace of every stage.
  ReferenceDecoder  layer-at-a-time evaluation, each operator standalone.

Both quantize the KV cache identically, so their logits must agree bit
for bit at every step; that equivalence is the core regression test.

Trace cost model
----------------
Weight-fed stages cost one cycle per 128-code bus beat of their tensor
slice. Cache-fed stages (the attention dot and the value mix) cost
max(1, head_dim/64) cycles per token row. Scalar-unit passes run at
spu_rate elements per cycle and are forwarded, so they overlap the
stream that produces or consumes them; the one ordering that can stall
the vector unit is softmax: the exponent pass cannot start until the
attention dot finishes (it needs the final max), and the value mix
consumes normalized weights two cycles behind it. Everything else is
charged but never gates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import CapacityError, FormatError, ShapeError
from .layout import BusGeometry, ScaleZeroPack, SzFifo
from .model_io import Checkpoint
from .numerics import DotEngineConfig, TrigTable, dot_rows, pad_to_lanes
from .ops import rms_sumsq, rmsnorm, rope_rotate, silu_gate, softmax
from .quant import kv_dequantize_rows, kv_quantize, KvQuantParams

STATE_VERSION = 1
SOFTMAX_FORWARD_LEAD = 2  # cycles between last exponent and first mix row


def greedy_pick(logits: np.ndarray) -> int:
    """Largest logit, first index on ties."""
    return int(np.argmax(logits))


def mix_rows(probs: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Probability-weighted row sum: sequential float32 accumulation over
    tokens, one binary16 rounding at the end."""
    if probs.shape[0] != rows.shape[0]:
        raise ShapeError(f"{probs.shape[0]} weights for {rows.shape[0]} rows")
    p32 = probs.astype(np.float32)[:, None]
    r32 = rows.astype(np.float32)
    return np.cumsum(p32 * r32, axis=0, dtype=np.float32)[-1].astype(np.float16)


def scale_logits(logits: np.ndarray, head_dim: int) -> np.ndarray:
    inv = np.float32(1.0 / math.sqrt(head_dim))
    return (logits.astype(np.float32) * inv).astype(np.float16)


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageSpan:
    name: str
    kind: str        # "vpu", "spu", or "stall"
    start: int
    end: int
    weight_beats: int = 0

    @property
    def cycles(self) -> int:
        return self.end - self.start


@dataclass
class TokenTrace:
    position: int
    spans: list[StageSpan] = field(default_factory=list)
    makespan: int = 0

    def add(self, name, kind, start, end, weight_beats=0) -> None:
        self.spans.append(StageSpan(name, kind, int(start), int(end), weight_beats))

    @property
    def vpu_cycles(self) -> int:
        return sum(s.cycles for s in self.spans if s.kind == "vpu")

    @property
    def stall_cycles(self) -> int:
        return sum(s.cycles for s in self.spans if s.kind == "stall")

    @property
    def weight_beats(self) -> int:
        return sum(s.weight_beats for s in self.spans)

    @property
    def spu_contained(self) -> bool:
        spu = [s.end for s in self.spans if s.kind == "spu"]
        return not spu or max(spu) <= self.makespan


def stall_free_context_bound(cfg: ModelConfig, spu_rate: float = 1.0,
                             lanes: int = 128) -> int:
    """Longest context the value-projection stream can hide softmax under.

    The exponent pass costs (t+1)/spu_rate cycles after the attention dot,
    plus the forwarding lead; it stalls nothing while that fits inside the
    value projection's beats.
    """
    gpr = -(-cfg.d_model // cfg.group_size)
    beats_per_row = -(-gpr * cfg.group_size // lanes)
    v_beats = cfg.head_dim * beats_per_row
    return int((v_beats - SOFTMAX_FORWARD_LEAD) * spu_rate) - 1


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------

class KVCacheStore:
    """Preallocated per-(layer, head) KV code arrays with one scale-zero
    pair per cached row. Rows land at the current length during a token;
    commit() publishes them. History reads never cross the length."""

    def __init__(self, cfg: ModelConfig) -> None:
        shape = (cfg.n_layers, cfg.n_heads, cfg.max_context)
        self.cfg = cfg
        self.codes = np.zeros((2,) + shape + (cfg.head_dim,), dtype=np.uint8)
        self.scales = np.zeros((2,) + shape, dtype=np.float16)
        self.zeros = np.zeros((2,) + shape, dtype=np.int16)
        self.length = 0

    def begin_token(self) -> int:
        if self.length >= self.cfg.max_context:
            raise CapacityError(
                f"cache full: {self.length} rows at max_context {self.cfg.max_context}")
        return self.length

    def write(self, layer: int, head: int, which: int,
              codes: np.ndarray, params: KvQuantParams) -> None:
        t = self.length
        self.codes[which, layer, head, t] = codes
        self.scales[which, layer, head, t] = params.scale
        self.zeros[which, layer, head, t] = params.zero_point

    def history(self, layer: int, head: int, which: int):
        t = self.length
        return (self.codes[which, layer, head, :t],
                self.scales[which, layer, head, :t],
                self.zeros[which, layer, head, :t])

    def commit(self) -> None:
        self.length += 1

    def save(self, path: str | Path) -> None:
        np.savez(path, version=STATE_VERSION, length=self.length,
                 codes=self.codes, scales=self.scales, zeros=self.zeros,
                 config=self.cfg.to_json_str())

    @classmethod
    def load(cls, path: str | Path, cfg: ModelConfig) -> "KVCacheStore":
        with np.load(Path(path)) as z:
            if int(z["version"]) != STATE_VERSION:
                raise FormatError(f"unsupported state version {int(z['version'])}")
            stored = ModelConfig.from_json_str(str(z["config"]), origin="state file")
            if stored != cfg:
                raise FormatError("state was captured under a different model config")
            store = cls(cfg)
            if z["codes"].shape != store.codes.shape:
                raise FormatError(f"state array shape {z['codes'].shape} is wrong")
            store.codes[...] = z["codes"]
            store.scales[...] = z["scales"]
            store.zeros[...] = z["zeros"]
            store.length = int(z["length"])
            if not 0 <= store.length <= cfg.max_context:
                raise FormatError(f"state length {store.length} out of range")
        return store


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------

class _WeightCache:
    """Dequantized, lane-padded weight matrices plus their beat costs."""

    def __init__(self, ckpt: Checkpoint, lanes: int) -> None:
        self.mats: dict[str, np.ndarray] = {}
        self.beats_per_row: dict[str, int] = {}
        for name, t in ckpt.tensors.items():
            deq = t.dequantized()
            padded_cols = -(-deq.shape[1] // lanes) * lanes
            mat = np.zeros((deq.shape[0], padded_cols), dtype=np.float16)
            mat[:, :deq.shape[1]] = deq
            self.mats[name] = mat
            self.beats_per_row[name] = padded_cols // lanes

    def stage_beats(self, name: str, rows: int) -> int:
        return rows * self.beats_per_row[name]


class Decoder:
    """Fused streaming decode with trace, FIFO, and carried norm state."""

    def __init__(self, ckpt: Checkpoint, collect_trace: bool = True,
                 spu_rate: float = 1.0, geom: BusGeometry | None = None,
                 engine: DotEngineConfig | None = None) -> None:
        ckpt.validate()
        self.ckpt = ckpt
        self.cfg = ckpt.config
        self.engine = engine or DotEngineConfig()
        self.collect_trace = collect_trace
        self.spu_rate = float(spu_rate)
        self.table = TrigTable.for_head_dim(
            self.cfg.head_dim, base=self.cfg.rope_base,
            freq_divisor=self.cfg.rope_freq_divisor)
        self.weights = _WeightCache(ckpt, self.engine.lanes)
        self.kv = KVCacheStore(self.cfg)
        self.fifo = SzFifo(self.cfg.n_layers, self.cfg.n_heads,
                           geom or BusGeometry())
        self.flushed_sz_beats = 0

    def _spu(self, n: int) -> int:
        return max(1, math.ceil(n / self.spu_rate))

    def _dot(self, name: str, vec: np.ndarray, row_lo: int = 0,
             row_hi: int | None = None) -> np.ndarray:
        mat = self.weights.mats[name]
        rows = mat if row_hi is None else mat[row_lo:row_hi]
        return dot_rows(rows, vec, self.engine)

    def step(self, token: int) -> tuple[np.ndarray, TokenTrace]:
        cfg = self.cfg
        if not 0 <= token < cfg.vocab_size:
            raise ShapeError(f"token {token} outside vocabulary 0..{cfg.vocab_size - 1}")
        t = self.kv.begin_token()
        hd, heads = cfg.head_dim, cfg.n_heads
        cache_unit = max(1, -(-hd // 64))
        trace = TokenTrace(position=t)
        c = 0  # vector-unit cycle cursor

        x = self.ckpt.embedding[token].copy()
        carry = rms_sumsq(x)
        if self.collect_trace:
            trace.add("embed", "spu", 0, self._spu(cfg.d_model))

        for layer in range(cfg.n_layers):
            pre = f"layers.{layer}."
            h_norm = rmsnorm(x, self.ckpt.norms[f"attn.{layer}"], cfg.norm_eps,
                             precomputed_sq=carry)
            h_pad = pad_to_lanes(h_norm, self.engine.lanes)
            if self.collect_trace:
                trace.add(f"L{layer}.attn_norm", "spu", c, c + self._spu(cfg.d_model))

            head_out = np.empty(cfg.d_model, dtype=np.float16)
            for head in range(heads):
                lo, hi = head * hd, (head + 1) * hd
                q = self._dot(pre + "attn.q", h_pad, lo, hi)
                qb = self.weights.stage_beats(pre + "attn.q", hd)
                if self.collect_trace:
                    trace.add(f"L{layer}.h{head}.q", "vpu", c, c + qb, weight_beats=qb)
                    trace.add(f"L{layer}.h{head}.rope_q", "spu", c + qb,
                              c + qb + self._spu(hd))
                c += qb

                k = self._dot(pre + "attn.k", h_pad, lo, hi)
                kb = self.weights.stage_beats(pre + "attn.k", hd)
                if self.collect_trace:
                    trace.add(f"L{layer}.h{head}.k", "vpu", c, c + kb, weight_beats=kb)
                    trace.add(f"L{layer}.h{head}.rope_k", "spu", c + kb,
                              c + kb + self._spu(hd))
                c += kb

                q = rope_rotate(q, t, self.table)
                k = rope_rotate(k, t, self.table)
                q_pad = pad_to_lanes(q, self.engine.lanes)

                # current-position logit first, history rows behind it,
                # all through the same tree reduction
                curr = dot_rows(pad_to_lanes(k, self.engine.lanes)[None], q_pad,
                                self.engine)
                codes, scales, zeros = self.kv.history(layer, head, 0)
                hist_k = kv_dequantize_rows(codes, scales, zeros)
                hist_pad = np.zeros((t, q_pad.size), dtype=np.float16)
                hist_pad[:, :hd] = hist_k
                logits_h = np.concatenate([dot_rows(hist_pad, q_pad, self.engine),
                                           curr])
                dot_cycles = (t + 1) * cache_unit
                dot_end = c + dot_cycles
                if self.collect_trace:
                    trace.add(f"L{layer}.h{head}.kv_dot", "vpu", c, dot_end)
                    trace.add(f"L{layer}.h{head}.softmax_max", "spu", c, dot_end)
                    kq = self._spu(2 * hd)
                    trace.add(f"L{layer}.h{head}.k_quant", "spu", dot_end - dot_cycles,
                              dot_end - dot_cycles + kq)
                c = dot_end

                probs = softmax(scale_logits(logits_h, hd))
                exp_end = dot_end + self._spu(t + 1)
                if self.collect_trace:
                    trace.add(f"L{layer}.h{head}.softmax_exp", "spu", dot_end, exp_end)
                    trace.add(f"L{layer}.h{head}.softmax_norm", "spu", exp_end,
                              exp_end + self._spu(t + 1))

                v = self._dot(pre + "attn.v", h_pad, lo, hi)
                vb = self.weights.stage_beats(pre + "attn.v", hd)
                if self.collect_trace:
                    trace.add(f"L{layer}.h{head}.v", "vpu", c, c + vb, weight_beats=vb)
                    trace.add(f"L{layer}.h{head}.v_quant", "spu", c,
                              c + self._spu(2 * hd))
                c += vb

                mix_start = max(c, exp_end + SOFTMAX_FORWARD_LEAD)
                if self.collect_trace and mix_start > c:
                    trace.add(f"L{layer}.h{head}.softmax_wait", "stall", c, mix_start)
                c = mix_start

                vcodes, vscales, vzeros = self.kv.history(layer, head, 1)
                hist_v = kv_dequantize_rows(vcodes, vscales, vzeros)
                rows = np.concatenate([hist_v, v[None]], axis=0)
                head_out[lo:hi] = mix_rows(probs, rows)
                if self.collect_trace:
                    trace.add(f"L{layer}.h{head}.value_mix", "vpu", c, c + dot_cycles)
                c += dot_cycles

                k_codes, k_params = kv_quantize(k)
                v_codes, v_params = kv_quantize(v)
                self.kv.write(layer, head, 0, k_codes, k_params)
                self.kv.write(layer, head, 1, v_codes, v_params)
                for which, params in ((0, k_params), (1, v_params)):
                    beat = self.fifo.push((layer, head, which),
                                          ScaleZeroPack.from_params(params))
                    if beat is not None:
                        self.flushed_sz_beats += 1

            o = self._dot(pre + "attn.o", pad_to_lanes(head_out, self.engine.lanes))
            ob = self.weights.stage_beats(pre + "attn.o", cfg.d_model)
            if self.collect_trace:
                trace.add(f"L{layer}.o", "vpu", c, c + ob, weight_beats=ob)
                trace.add(f"L{layer}.attn_residual", "spu", c, c + self._spu(cfg.d_model))
            c += ob
            x = (x.astype(np.float32) + o.astype(np.float32)).astype(np.float16)
            carry = rms_sumsq(x)

            h2 = rmsnorm(x, self.ckpt.norms[f"mlp.{layer}"], cfg.norm_eps,
                         precomputed_sq=carry)
            h2_pad = pad_to_lanes(h2, self.engine.lanes)
            if self.collect_trace:
                trace.add(f"L{layer}.mlp_norm", "spu", c, c + self._spu(cfg.d_model))

            # gate and up rows interleave on the stream: one merged stage
            gate = self._dot(pre + "mlp.gate", h2_pad)
            up = self._dot(pre + "mlp.up", h2_pad)
            gb = self.weights.stage_beats(pre + "mlp.gate", cfg.d_ffn) \
                + self.weights.stage_beats(pre + "mlp.up", cfg.d_ffn)
            act = silu_gate(gate, up)
            if self.collect_trace:
                trace.add(f"L{layer}.gate_up", "vpu", c, c + gb, weight_beats=gb)
                trace.add(f"L{layer}.silu", "spu", c, c + self._spu(cfg.d_ffn))
            c += gb

            down = self._dot(pre + "mlp.down", pad_to_lanes(act, self.engine.lanes))
            db = self.weights.stage_beats(pre + "mlp.down", cfg.d_model)
            if self.collect_trace:
                trace.add(f"L{layer}.down", "vpu", c, c + db, weight_beats=db)
                trace.add(f"L{layer}.mlp_residual", "spu", c, c + self._spu(cfg.d_model))
            c += db
            x = (x.astype(np.float32) + down.astype(np.float32)).astype(np.float16)
            carry = rms_sumsq(x)

        h_final = rmsnorm(x, self.ckpt.norms["final"], cfg.norm_eps,
                          precomputed_sq=carry)
        logits = self._dot("lm_head", pad_to_lanes(h_final, self.engine.lanes))
        lb = self.weights.stage_beats("lm_head", cfg.vocab_size)
        if self.collect_trace:
            trace.add("final_norm", "spu", c, c + self._spu(cfg.d_model))
            trace.add("lm_head", "vpu", c, c + lb, weight_beats=lb)
            trace.add("argmax", "spu", c, c + self._spu(cfg.vocab_size))
        c += lb
        trace.makespan = c

        self.kv.commit()
        return logits, trace


class ReferenceDecoder:
    """Whole-projection, operator-at-a-time evaluation of the same model."""

    def __init__(self, ckpt: Checkpoint, engine: DotEngineConfig | None = None) -> None:
        ckpt.validate()
        self.ckpt = ckpt
        self.cfg = ckpt.config
        self.engine = engine or DotEngineConfig()
        self.table = TrigTable.for_head_dim(
            self.cfg.head_dim, base=self.cfg.rope_base,
            freq_divisor=self.cfg.rope_freq_divisor)
        self.weights = _WeightCache(ckpt, self.engine.lanes)
        self.kv = KVCacheStore(self.cfg)

    def step(self, token: int) -> np.ndarray:
        cfg = self.cfg
        t = self.kv.begin_token()
        hd = cfg.head_dim
        x = self.ckpt.embedding[token].copy()
        for layer in range(cfg.n_layers):
            pre = f"layers.{layer}."
            h = rmsnorm(x, self.ckpt.norms[f"attn.{layer}"], cfg.norm_eps)
            h_pad = pad_to_lanes(h, self.engine.lanes)
            q_all = dot_rows(self.weights.mats[pre + "attn.q"], h_pad, self.engine)
            k_all = dot_rows(self.weights.mats[pre + "attn.k"], h_pad, self.engine)
            v_all = dot_rows(self.weights.mats[pre + "attn.v"], h_pad, self.engine)
            out = np.empty(cfg.d_model, dtype=np.float16)
            for head in range(cfg.n_heads):
                lo, hi = head * hd, (head + 1) * hd
                q = rope_rotate(q_all[lo:hi], t, self.table)
                k = rope_rotate(k_all[lo:hi], t, self.table)
                v = v_all[lo:hi]
                q_pad = pad_to_lanes(q, self.engine.lanes)
                codes, scales, zeros = self.kv.history(layer, head, 0)
                hist_pad = np.zeros((t, q_pad.size), dtype=np.float16)
                hist_pad[:, :hd] = kv_dequantize_rows(codes, scales, zeros)
                logits_h = np.concatenate([
                    dot_rows(hist_pad, q_pad, self.engine),
                    dot_rows(pad_to_lanes(k, self.engine.lanes)[None], q_pad,
                             self.engine)])
                probs = softmax(scale_logits(logits_h, hd))
                vc, vs, vz = self.kv.history(layer, head, 1)
                rows = np.concatenate([kv_dequantize_rows(vc, vs, vz), v[None]],
                                      axis=0)
                out[lo:hi] = mix_rows(probs, rows)
                kc, kp = kv_quantize(k)
                vcod, vp = kv_quantize(v)
                self.kv.write(layer, head, 0, kc, kp)
                self.kv.write(layer, head, 1, vcod, vp)
            o = dot_rows(self.weights.mats[pre + "attn.o"],
                         pad_to_lanes(out, self.engine.lanes), self.engine)
            x = (x.astype(np.float32) + o.astype(np.float32)).astype(np.float16)
            h2 = rmsnorm(x, self.ckpt.norms[f"mlp.{layer}"], cfg.norm_eps)
            h2_pad = pad_to_lanes(h2, self.engine.lanes)
            gate = dot_rows(self.weights.mats[pre + "mlp.gate"], h2_pad, self.engine)
            up = dot_rows(self.weights.mats[pre + "mlp.up"], h2_pad, self.engine)
            act = silu_gate(gate, up)
            down = dot_rows(self.weights.mats[pre + "mlp.down"],
                            pad_to_lanes(act, self.engine.lanes), self.engine)
            x = (x.astype(np.float32) + down.astype(np.float32)).astype(np.float16)
        h = rmsnorm(x, self.ckpt.norms["final"], cfg.norm_eps)
        logits = dot_rows(self.weights.mats["lm_head"],
                          pad_to_lanes(h, self.engine.lanes), self.engine)
        self.kv.commit()
        return logits


# ---------------------------------------------------------------------------
# sequence driver
# ---------------------------------------------------------------------------

@dataclass
class DecodeResult:
    prompt: list[int]
    tokens: list[int]
    logits: np.ndarray
    traces: list[TokenTrace]
    steps: int
    verified_steps: int | None = None

    @property
    def stall_cycles(self) -> int:
        return sum(tr.stall_cycles for tr in self.traces)

    @property
    def total_cycles(self) -> int:
        return sum(tr.makespan for tr in self.traces)


def run_decode(ckpt: Checkpoint, prompt: list[int], n_new: int,
               collect_trace: bool = True, verify: bool = False,
               spu_rate: float = 1.0) -> DecodeResult:
    """Greedy decode: feed the prompt, then generate n_new tokens.

    With verify on, a reference evaluation runs beside the fused one and
    each step's logits are compared bit for bit.
    """
    if not prompt:
        raise ShapeError("prompt must hold at least one token")
    if n_new < 1:
        raise ShapeError("n_new must be at least 1")
    dec = Decoder(ckpt, collect_trace=collect_trace, spu_rate=spu_rate)
    ref = ReferenceDecoder(ckpt) if verify else None

    traces: list[TokenTrace] = []
    tokens: list[int] = []
    verified = 0
    feed = list(prompt)
    steps = len(prompt) + n_new - 1
    logits = None
    for i in range(steps):
        tok = feed[i] if i < len(feed) else tokens[-1]
        logits, trace = dec.step(tok)
        traces.append(trace)
        if ref is not None:
            ref_logits = ref.step(tok)
            if np.array_equal(logits, ref_logits):
                verified += 1
        if i >= len(prompt) - 1:
            tokens.append(greedy_pick(logits))
    return DecodeResult(prompt=list(prompt), tokens=tokens, logits=logits,
                        traces=traces, steps=steps,
                        verified_steps=verified if verify else None)
