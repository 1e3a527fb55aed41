import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tissuemanip.dynamics import (
    AdamState,
    MlpDynamics,
    Normalizer,
    ReplayMemory,
    fit_normalizer,
    init_random,
    load_checkpoint,
    save_checkpoint,
    train_minibatch,
    _loss_and_grads,
)
from tissuemanip.state import Experience


def zero_model(k=4, m=2, hidden=(12, 12)):
    model = init_random(0, k=k, m=m, hidden=hidden)
    for p in model.parameters().values():
        p[:] = 0.0
    return model


def random_experience(rng, k=4, m=2):
    return Experience(
        tuple(rng.uniform(0, 644, 2 * k)),
        tuple(rng.uniform(0, 644, 2 * m)),
        tuple(rng.uniform(-5, 5, 2 * m)),
        tuple(rng.uniform(-3, 3, 2 * k)),
    )


class TestPredict:
    def test_zero_network_maps_to_zero(self):
        model = zero_model()
        rng = np.random.default_rng(0)
        out = model.predict(rng.normal(size=8), rng.normal(size=4), rng.normal(size=4))
        np.testing.assert_array_equal(out, np.zeros(8))

    def test_relu_passthrough_positive(self):
        model = zero_model()
        model.w1[0, 0] = 1.0
        model.w2[0, 0] = 1.0
        model.w3[0, 0] = 1.0
        tissue = np.zeros(8)
        tissue[0] = 2.0
        out = model.predict(tissue, np.zeros(4), np.zeros(4))
        assert out[0] == 2.0
        np.testing.assert_array_equal(out[1:], np.zeros(7))

    def test_relu_gates_negative(self):
        model = zero_model()
        model.w1[0, 0] = 1.0
        model.w2[0, 0] = 1.0
        model.w3[0, 0] = 1.0
        tissue = np.zeros(8)
        tissue[0] = -2.0
        out = model.predict(tissue, np.zeros(4), np.zeros(4))
        assert out[0] == 0.0

    def test_rejects_non_finite(self):
        model = zero_model()
        tissue = np.zeros(8)
        tissue[3] = float("nan")
        with pytest.raises(ValueError):
            model.predict(tissue, np.zeros(4), np.zeros(4))

    def test_batched_matches_single(self):
        model = init_random(3)
        rng = np.random.default_rng(1)
        tissue = rng.normal(size=(5, 8))
        gripper = rng.normal(size=(5, 4))
        ctrl = rng.normal(size=(5, 4))
        batched = model.predict(tissue, gripper, ctrl)
        for i in range(5):
            single = model.predict(tissue[i], gripper[i], ctrl[i])
            np.testing.assert_allclose(batched[i], single, rtol=1e-12, atol=1e-14)

    def test_piecewise_linear_region(self):
        # three collinear inputs inside one ReLU region give collinear outputs
        model = init_random(7)
        rng = np.random.default_rng(2)
        base = rng.normal(size=16) * 0.5
        direction = rng.normal(size=16) * 1e-3
        xs = [base, base + direction, base + 2 * direction]
        outs = [model.predict(x[:8], x[8:12], x[12:]) for x in xs]
        mid = (outs[0] + outs[2]) / 2.0
        np.testing.assert_allclose(outs[1], mid, rtol=1e-9, atol=1e-12)


class TestAdam:
    def test_first_step_hand_evaluated(self):
        # scalar parameter 0, constant gradient 0.5, lr 0.01:
        # m_hat = g, v_hat = g^2 -> step = -lr * g / (|g| + eps)
        params = {"w": np.array([0.0])}
        adam = AdamState(learning_rate=0.01)
        adam.m["w"] = np.zeros(1)
        adam.v["w"] = np.zeros(1)
        adam.apply(params, {"w": np.array([0.5])})
        expected = -0.01 * 0.5 / (math.sqrt(0.25) + 1e-8)
        assert params["w"][0] == pytest.approx(expected, abs=1e-12)

    def test_three_steps_match_reference_formula(self):
        rng = np.random.default_rng(5)
        theta = rng.normal(size=7)
        grad = rng.normal(size=7)
        params = {"w": theta.copy()}
        adam = AdamState(learning_rate=0.01)
        adam.m["w"] = np.zeros(7)
        adam.v["w"] = np.zeros(7)
        ref = theta.copy()
        m = np.zeros(7)
        v = np.zeros(7)
        for t in range(1, 4):
            adam.apply(params, {"w": grad})
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            m_hat = m / (1 - 0.9 ** t)
            v_hat = v / (1 - 0.999 ** t)
            ref = ref - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
            np.testing.assert_allclose(params["w"], ref, rtol=0, atol=1e-10)


class TestGradients:
    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(9)
        model = init_random(9, k=2, m=1, hidden=(5, 4))
        x = rng.normal(size=(3, model.input_dim))
        target = rng.normal(size=(3, model.output_dim))
        _, grads = _loss_and_grads(model, x, target)
        h = 1e-5
        for name, p in model.parameters().items():
            flat = p.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp, _ = _loss_and_grads(model, x, target)
                flat[i] = orig - h
                lm, _ = _loss_and_grads(model, x, target)
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                an = grads[name].reshape(-1)[i]
                denom = max(abs(fd), abs(an), 1e-8)
                assert abs(fd - an) / denom < 1e-4, f"{name}[{i}]: fd={fd} an={an}"


class TestInitRandom:
    def test_reproducible(self):
        a = init_random(42)
        b = init_random(42)
        for pa, pb in zip(a.parameters().values(), b.parameters().values()):
            np.testing.assert_array_equal(pa, pb)

    def test_seeds_differ(self):
        a = init_random(1)
        b = init_random(2)
        assert not np.array_equal(a.w1, b.w1)

    def test_weight_distribution(self):
        # mean of 10,000 draws sits within 5 standard errors (5*sigma/100) of zero
        rng_model = init_random(7, k=50, m=25, hidden=(50, 50))
        weights = rng_model.w1.reshape(-1)
        sigma = 1.0 / math.sqrt(rng_model.input_dim)
        assert weights.size == 10_000
        assert abs(weights.mean()) < 5 * sigma / 100
        assert np.allclose(weights.std(), sigma, rtol=0.1)

    def test_biases_zero(self):
        model = init_random(3)
        assert not model.b1.any() and not model.b2.any() and not model.b3.any()


class TestNormalizer:
    def test_midpoint_maps_to_zero(self):
        n = Normalizer.from_range(np.array([0.0]), np.array([644.0]))
        assert n.normalize(np.array([322.0]))[0] == 0.0
        assert n.normalize(np.array([644.0]))[0] == pytest.approx(1.0, rel=1e-12)
        assert n.normalize(np.array([0.0]))[0] == pytest.approx(-1.0, rel=1e-12)

    def test_degenerate_range_identity(self):
        n = Normalizer.from_range(np.array([7.0, 0.0]), np.array([7.0, 10.0]))
        assert n.normalize(np.array([7.0, 5.0]))[0] == 7.0
        assert n.offset[0] == 0.0 and n.scale[0] == 1.0

    @given(st.floats(-1e6, 1e6), st.floats(-100, 100), st.floats(0.001, 1000))
    def test_roundtrip(self, value, lo, span):
        n = Normalizer.from_range(np.array([lo]), np.array([lo + span]))
        back = n.denormalize(n.normalize(np.array([value])))[0]
        assert back == pytest.approx(value, rel=1e-12, abs=1e-9)

    def test_fit_from_memory(self):
        mem = ReplayMemory(10)
        mem.push(Experience((0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, -2.0)))
        mem.push(Experience((644.0, 0.0), (10.0, 0.0), (4.0, 0.0), (1.0, 4.0)))
        in_norm, out_norm = fit_normalizer(mem)
        assert in_norm.normalize(np.array([322.0, 0, 5, 0, 2, 0]))[0] == 0.0
        # constant components stay identity
        assert in_norm.scale[1] == 1.0 and in_norm.offset[1] == 0.0
        # outputs scaled by 1 / max |delta|
        np.testing.assert_allclose(out_norm.scale, [1.0, 0.25])

    def test_fit_requires_data(self):
        with pytest.raises(ValueError):
            fit_normalizer(ReplayMemory(4))


class TestReplayMemory:
    def test_fifo_eviction(self):
        mem = ReplayMemory(3)
        rng = np.random.default_rng(0)
        exps = [random_experience(rng) for _ in range(5)]
        for e in exps:
            mem.push(e)
        assert len(mem) == 3
        tissue, _, _, _ = mem.contents()
        stored = {tuple(row) for row in tissue}
        assert tuple(exps[0].tissue_pos) not in stored
        assert tuple(exps[4].tissue_pos) in stored

    def test_minibatch_never_repeats_index(self):
        mem = ReplayMemory(100)
        rng = np.random.default_rng(1)
        for _ in range(50):
            mem.push(random_experience(rng))
        tissue, _, _, _ = mem.sample(50, rng)
        assert len({tuple(r) for r in tissue}) == 50

    def test_every_index_reachable(self):
        mem = ReplayMemory(100)
        rng = np.random.default_rng(2)
        for _ in range(10):
            mem.push(random_experience(rng))
        seen = set()
        for _ in range(200):
            tissue, _, _, _ = mem.sample(3, rng)
            seen.update(tuple(r) for r in tissue)
        assert len(seen) == 10

    def test_sample_larger_than_size_raises(self):
        mem = ReplayMemory(10)
        mem.push(random_experience(np.random.default_rng(0)))
        with pytest.raises(ValueError):
            mem.sample(2, np.random.default_rng(0))


class TestTraining:
    def test_zero_residual_keeps_loss_zero(self):
        model = zero_model()
        mem = ReplayMemory(10)
        rng = np.random.default_rng(0)
        for _ in range(5):
            e = random_experience(rng)
            mem.push(Experience(e.tissue_pos, e.gripper_pos, e.input, (0.0,) * 8))
        adam = AdamState.for_model(model)
        before = {k: v.copy() for k, v in model.parameters().items()}
        loss = train_minibatch(model, mem, 5, adam, rng)
        assert loss == 0.0
        for k, v in model.parameters().items():
            assert np.abs(v - before[k]).max() <= 1e-7  # eps-scale drift only

    def test_skips_when_memory_small(self):
        model = init_random(0)
        mem = ReplayMemory(10)
        mem.push(random_experience(np.random.default_rng(0)))
        adam = AdamState.for_model(model)
        assert train_minibatch(model, mem, 5, adam, np.random.default_rng(0)) is None

    def test_learns_linear_dynamics(self):
        # delta = A @ [tissue, gripper, input] with small A; loss < 1e-3 within 5000 steps
        rng = np.random.default_rng(11)
        a_mat = rng.normal(0, 0.05, size=(16, 8))
        mem = ReplayMemory(2000)
        for _ in range(500):
            x = rng.uniform(-1, 1, 16)
            delta = x @ a_mat
            mem.push(Experience(tuple(x[:8]), tuple(x[8:12]), tuple(x[12:]), tuple(delta)))
        model = init_random(13)
        in_norm, out_norm = fit_normalizer(mem)
        model.in_norm = in_norm
        model.out_norm = out_norm
        adam = AdamState.for_model(model, learning_rate=0.01)
        loss = None
        for step in range(5000):
            loss = train_minibatch(model, mem, 200, adam, rng)
            if loss is not None and loss < 1e-3:
                break
        assert loss is not None and loss < 1e-3


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        model = init_random(21)
        mem = ReplayMemory(300)
        for _ in range(250):
            mem.push(random_experience(rng))
        in_norm, out_norm = fit_normalizer(mem)
        model.in_norm = in_norm
        model.out_norm = out_norm
        adam = AdamState.for_model(model)
        for _ in range(3):
            train_minibatch(model, mem, 200, adam, rng)
        path = tmp_path / "model.ckpt.json"
        save_checkpoint(path, model, adam, meta={"seed": 21})
        loaded, loaded_adam, meta = load_checkpoint(path)
        assert meta == {"seed": 21}
        for k in model.parameters():
            np.testing.assert_array_equal(loaded.parameters()[k], model.parameters()[k])
        np.testing.assert_array_equal(loaded.in_norm.offset, model.in_norm.offset)
        np.testing.assert_array_equal(loaded.in_norm.scale, model.in_norm.scale)
        np.testing.assert_array_equal(loaded.out_norm.scale, model.out_norm.scale)
        assert loaded_adam is not None and loaded_adam.step == adam.step
        for k in adam.m:
            np.testing.assert_array_equal(loaded_adam.m[k], adam.m[k])
            np.testing.assert_array_equal(loaded_adam.v[k], adam.v[k])
        # predictions bit-identical
        x = np.random.default_rng(0).normal(size=(4, 8))
        g = np.random.default_rng(1).normal(size=(4, 4))
        u = np.random.default_rng(2).normal(size=(4, 4))
        np.testing.assert_array_equal(loaded.predict(x, g, u), model.predict(x, g, u))

    def test_rejects_unknown_format(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_checkpoint(path)
