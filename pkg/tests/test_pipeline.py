"""Decode pipeline tests: fused/reference equivalence, cache causality,
trace accounting, and sequence-level behavior."""

import numpy as np
import pytest

from beatstream.config import ModelConfig, llama2_7b_config, tiny_demo_config
from beatstream.errors import CapacityError, FormatError, ShapeError
from beatstream.model_io import build_demo_checkpoint
from beatstream.numerics import to_half
from beatstream.pipeline import (
    Decoder,
    KVCacheStore,
    ReferenceDecoder,
    greedy_pick,
    mix_rows,
    run_decode,
    stall_free_context_bound,
)
from beatstream.quant import KvQuantParams, kv_quantize


def random_config(rng):
    heads = int(rng.choice([1, 2, 4]))
    head_dim = int(rng.choice([8, 16, 32]))
    return ModelConfig(
        n_layers=int(rng.integers(1, 3)),
        d_model=heads * head_dim,
        n_heads=heads,
        d_ffn=int(rng.integers(8, 96)),
        vocab_size=int(rng.integers(32, 200)),
        group_size=int(rng.choice([32, 64, 128])),
        max_context=24,
    )


class TestMixRows:
    def test_single_row_identity(self):
        v = to_half(np.random.default_rng(1).normal(size=16))
        out = mix_rows(np.array([1.0], dtype=np.float16), v[None])
        assert np.array_equal(out, v)

    def test_matches_sequential_oracle(self):
        rng = np.random.default_rng(2)
        probs = to_half(rng.uniform(0, 1, size=9))
        rows = to_half(rng.normal(size=(9, 12)))
        got = mix_rows(probs, rows)
        acc = np.zeros(12, dtype=np.float32)
        for i in range(9):
            acc = acc + np.float32(probs[i]) * rows[i].astype(np.float32)
        assert np.array_equal(got, acc.astype(np.float16))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            mix_rows(np.ones(3, dtype=np.float16), np.ones((2, 4), dtype=np.float16))


class TestKVCacheStore:
    def test_write_and_history(self):
        cfg = tiny_demo_config(max_context=4)
        store = KVCacheStore(cfg)
        x = to_half(np.linspace(-1, 1, cfg.head_dim))
        codes, params = kv_quantize(x)
        store.begin_token()
        store.write(1, 2, 0, codes, params)
        store.commit()
        got_codes, got_scales, got_zeros = store.history(1, 2, 0)
        assert np.array_equal(got_codes[0], codes)
        assert got_scales[0] == params.scale
        assert int(got_zeros[0]) == params.zero_point

    def test_capacity(self):
        cfg = tiny_demo_config(max_context=2)
        store = KVCacheStore(cfg)
        store.begin_token(); store.commit()
        store.begin_token(); store.commit()
        with pytest.raises(CapacityError):
            store.begin_token()

    def test_snapshot_round_trip(self, tmp_path):
        cfg = tiny_demo_config(max_context=6)
        store = KVCacheStore(cfg)
        rng = np.random.default_rng(3)
        for _ in range(3):
            store.begin_token()
            for layer in range(cfg.n_layers):
                for head in range(cfg.n_heads):
                    for which in (0, 1):
                        codes, params = kv_quantize(to_half(rng.normal(size=cfg.head_dim)))
                        store.write(layer, head, which, codes, params)
            store.commit()
        path = tmp_path / "state.npz"
        store.save(path)
        back = KVCacheStore.load(path, cfg)
        assert back.length == 3
        assert np.array_equal(back.codes, store.codes)
        assert np.array_equal(back.scales, store.scales)
        assert np.array_equal(back.zeros, store.zeros)

    def test_snapshot_config_mismatch(self, tmp_path):
        cfg = tiny_demo_config(max_context=6)
        store = KVCacheStore(cfg)
        path = tmp_path / "state.npz"
        store.save(path)
        with pytest.raises(FormatError):
            KVCacheStore.load(path, tiny_demo_config(max_context=8))

    def test_snapshot_version_check(self, tmp_path):
        cfg = tiny_demo_config(max_context=4)
        store = KVCacheStore(cfg)
        path = tmp_path / "state.npz"
        store.save(path)
        with np.load(path) as z:
            payload = {k: z[k] for k in z.files}
        payload["version"] = np.int64(99)
        np.savez(path, **payload)
        with pytest.raises(FormatError):
            KVCacheStore.load(path, cfg)


class TestFusedMatchesReference:
    def test_demo_model_bitwise(self, demo_ckpt):
        dec = Decoder(demo_ckpt, collect_trace=False)
        ref = ReferenceDecoder(demo_ckpt)
        tok = 5
        for _ in range(10):
            fused, _ = dec.step(tok)
            plain = ref.step(tok)
            assert np.array_equal(fused, plain)
            tok = greedy_pick(fused)

    def test_random_configs_bitwise(self):
        rng = np.random.default_rng(90)
        for trial in range(5):
            cfg = random_config(rng)
            ckpt = build_demo_checkpoint(seed=trial, cfg=cfg)
            dec = Decoder(ckpt, collect_trace=False)
            ref = ReferenceDecoder(ckpt)
            tok = int(rng.integers(0, cfg.vocab_size))
            for _ in range(8):
                fused, _ = dec.step(tok)
                plain = ref.step(tok)
                assert np.array_equal(fused, plain)
                tok = greedy_pick(fused)


class TestCausality:
    def test_future_rows_are_dead(self, demo_ckpt):
        a = Decoder(demo_ckpt, collect_trace=False)
        b = Decoder(demo_ckpt, collect_trace=False)
        rng = np.random.default_rng(14)
        tok = 9
        for _ in range(6):
            # poison every row at or past the published length in b
            t = b.kv.length
            b.kv.codes[:, :, :, t:] = rng.integers(0, 256, b.kv.codes[:, :, :, t:].shape)
            b.kv.scales[:, :, :, t:] = np.float16(123.0)
            b.kv.zeros[:, :, :, t:] = -7
            la, _ = a.step(tok)
            lb, _ = b.step(tok)
            assert np.array_equal(la, lb)
            tok = greedy_pick(la)


def expected_weight_beats(cfg, lanes=128):
    def beats(rows, cols):
        gpr = -(-cols // cfg.group_size)
        padded = -(-gpr * cfg.group_size // lanes) * lanes
        return rows * (padded // lanes)

    per_layer = sum(beats(r, c) for r, c in cfg.projection_shapes().values())
    return cfg.n_layers * per_layer + beats(cfg.vocab_size, cfg.d_model)


class TestTrace:
    def test_weight_beats_match_layout(self, demo_ckpt):
        dec = Decoder(demo_ckpt)
        logits, trace = dec.step(3)
        assert trace.weight_beats == expected_weight_beats(demo_ckpt.config)

    def test_makespan_is_vpu_plus_stalls(self, demo_ckpt):
        dec = Decoder(demo_ckpt)
        for tok in (1, 2, 3):
            _, trace = dec.step(tok)
            assert trace.makespan == trace.vpu_cycles + trace.stall_cycles

    def test_stall_free_inside_bound(self, demo_ckpt):
        bound = stall_free_context_bound(demo_ckpt.config)
        assert bound == 13
        res = run_decode(demo_ckpt, [1], 12)
        assert res.steps == 12
        assert all(tr.stall_cycles == 0 for tr in res.traces)
        assert all(tr.spu_contained for tr in res.traces)

    def test_stalls_grow_past_bound(self, demo_ckpt):
        cfg = demo_ckpt.config
        res = run_decode(demo_ckpt, [1], 20)
        bound = stall_free_context_bound(cfg)
        per_head = cfg.n_layers * cfg.n_heads
        for tr in res.traces:
            want = per_head * max(0, tr.position - bound)
            assert tr.stall_cycles == want

    def test_7b_bound_covers_published_context(self):
        assert stall_free_context_bound(llama2_7b_config()) >= 1024


class TestRunDecode:
    def test_verify_counts_every_step(self, demo_ckpt):
        res = run_decode(demo_ckpt, [1], 8, verify=True)
        assert res.verified_steps == res.steps == 8
        assert len(res.tokens) == 8

    def test_deterministic(self, demo_ckpt):
        a = run_decode(demo_ckpt, [2], 10)
        b = run_decode(demo_ckpt, [2], 10)
        assert a.tokens == b.tokens
        assert np.array_equal(a.logits, b.logits)

    def test_capacity_error_past_context(self):
        cfg = tiny_demo_config(max_context=4)
        ckpt = build_demo_checkpoint(seed=0, cfg=cfg)
        with pytest.raises(CapacityError):
            run_decode(ckpt, [0], 8)

    def test_greedy_tie_takes_first(self):
        assert greedy_pick(np.array([2.0, 5.0, 5.0], dtype=np.float16)) == 1

    def test_token_range_checked(self, demo_ckpt):
        dec = Decoder(demo_ckpt)
        with pytest.raises(ShapeError):
            dec.step(demo_ckpt.config.vocab_size)

    def test_fifo_accounting(self, demo_ckpt):
        cfg = demo_ckpt.config
        dec = Decoder(demo_ckpt, collect_trace=False)
        for i in range(20):
            dec.step(i % cfg.vocab_size)
        streams = cfg.n_layers * cfg.n_heads * 2
        assert dec.fifo.pushed == 20 * streams
        assert dec.fifo.flushed_beats == streams  # one flush per stream at 16
        assert dec.fifo.residual_packs() == 4 * streams
        assert dec.flushed_sz_beats == streams

    def test_snapshot_resume(self, demo_ckpt, tmp_path):
        a = Decoder(demo_ckpt, collect_trace=False)
        for tok in (1, 2, 3, 4, 5, 6):
            a.step(tok)
        path = tmp_path / "kv.npz"
        a.kv.save(path)
        b = Decoder(demo_ckpt, collect_trace=False)
        b.kv = KVCacheStore.load(path, demo_ckpt.config)
        la, _ = a.step(7)
        lb, _ = b.step(7)
        assert np.array_equal(la, lb)
