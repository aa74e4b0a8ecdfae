from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prefact.errors import ArgumentError, PlanError
from prefact.factorize import (
    FactorizationPlan, factorize_model, layer_savings, make_plan, parse_ratio, rank_for,
    reconstruction_errors, vanilla_plan,
)
from prefact.layers import FC, Conv2d
from prefact.numerics import svd, unroll_conv_weight
from prefact.zoo import build_model


def trained(arch="toy_cnn", seed=0, **opts):
    # stands in for a trained model: seeded weights, nonzero BN statistics
    m = build_model(arch, "vanilla", seed=seed, **opts)
    rng = np.random.default_rng(seed)
    for lf in m.leaves:
        if lf.buffer_shapes():
            lf.set_buffers({k: rng.uniform(0.5, 1.5, s) for k, s in lf.buffer_shapes().items()})
    return m


# --- ranks and plans -------------------------------------------------------------------------

def test_rank_examples():
    assert rank_for(Conv2d(512, 512, 3).spec, Fraction(1, 4)) == 128
    assert rank_for(Conv2d(1024, 2048, 1).spec, "1/4") == 256
    assert rank_for(FC(512, 512).spec, 1) == 512
    assert rank_for(FC(3, 2).spec, "1/4") == 1


def test_parse_ratio():
    assert parse_ratio("1/4") == Fraction(1, 4)
    assert parse_ratio("0.25") == Fraction(1, 4)
    for bad in ("0", "5/4", "x", "1/0"):
        with pytest.raises(ArgumentError):
            parse_ratio(bad)


def test_k_past_end_is_vanilla():
    m = build_model("toy_mlp")
    plan = make_plan(m, len(m.param_layers) + 1)
    assert all(r is None for r in plan.resolve(m).values())


def test_k_one_factorizes_all_eligible():
    m = build_model("toy_mlp")
    ranks = make_plan(m, 1).resolve(m)
    assert ranks["fc1"] is not None and ranks["fc2"] is not None
    assert ranks["fc3"] is None  # final classifier stays full-rank


def test_first_conv_always_full():
    m = build_model("toy_cnn")
    assert make_plan(m, 1).resolve(m)["conv1"] is None


def test_vgg_default_plan_count():
    from prefact.zoo import default_plan
    v = build_model("vgg19_cifar10")
    plan = default_plan("vgg19_cifar10")
    assert v.param_count() - sum(layer_savings(v, plan).values()) == 8_370_634


def test_plan_errors():
    m = build_model("toy_cnn")
    with pytest.raises(PlanError):
        FactorizationPlan("toy_cnn", 0).resolve(m)
    with pytest.raises(PlanError):
        FactorizationPlan("toy_cnn", 2, exceptions=[{"layer": "nope", "action": "full"}]).resolve(m)
    with pytest.raises(PlanError):
        FactorizationPlan("toy_cnn", 2, exceptions=[{"layer": "fc2", "action": "rank", "rank": 1}]).resolve(m)
    with pytest.raises(PlanError):
        FactorizationPlan("toy_cnn", 2, exceptions=[{"layer": "conv2", "action": "rank", "rank": 999}]).resolve(m)
    with pytest.raises(PlanError):
        FactorizationPlan("toy_cnn", 2, exceptions=[{"layer": "conv2", "action": "shrink"}])
    with pytest.raises(PlanError):
        factorize_model(trained(), FactorizationPlan("toy_mlp", 2))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7), st.integers(1, 8), st.integers(1, 8))
def test_plan_json_round_trip(K, num, extra):
    den = num + extra - 1  # ratio in (0, 1]
    plan = FactorizationPlan("toy_cnn", K, Fraction(num, den),
                             [{"layer": "conv2", "action": "rank", "rank": 3}])
    again = FactorizationPlan.loads(plan.dumps())
    assert again == plan and again.dumps() == plan.dumps()


# --- factorize_model ---------------------------------------------------------------------------

def test_all_full_rank_plan_is_bitwise_identical():
    v = trained()
    h = factorize_model(v, vanilla_plan(v))
    x = np.random.default_rng(1).standard_normal((4, 1, 8, 8))
    v.eval(), h.eval()
    assert np.array_equal(v.forward(x), h.forward(x))


@pytest.mark.parametrize("arch,shape", [("toy_cnn", (4, 1, 8, 8)), ("toy_mlp", (5, 16))])
def test_natural_bound_matches_vanilla(arch, shape):
    v = trained(arch)
    h = factorize_model(v, make_plan(v, 1, Fraction(1)))
    assert any(r is not None for r in h.ranks().values())
    x = np.random.default_rng(2).standard_normal(shape)
    v.eval(), h.eval()
    a, b = h.forward(x), v.forward(x)
    assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(b)


def test_lstm_and_transformer_natural_bound():
    for arch in ("toy_lstm", "toy_transformer"):
        v = trained(arch)
        h = factorize_model(v, make_plan(v, 1, Fraction(1)))
        toks = np.random.default_rng(3).integers(0, 32, size=(6, 2) if arch == "toy_lstm" else (2, 16))
        v.eval(), h.eval()
        a, b = h.forward(toks), v.forward(toks)
        assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(b)


def test_reconstruction_error_is_tail_norm():
    v = trained()
    h = factorize_model(v, make_plan(v, 1, Fraction(1, 4)))
    errs = reconstruction_errors(v, h)
    assert set(errs) == {"conv2", "conv3", "fc1"}
    for name, err in errs.items():
        w = v.leaf(name).params["weight"]
        s = svd(unroll_conv_weight(w) if w.ndim == 4 else w).s
        r = h.leaf(name).rank
        assert abs(err - np.sqrt(np.sum(s[r:] ** 2))) <= 1e-9 * max(1.0, s[0])


def test_error_monotone_in_rank():
    v = trained()
    prev = np.inf
    for r in range(1, 33):
        plan = FactorizationPlan("toy_cnn", 6, exceptions=[{"layer": "conv3", "action": "rank", "rank": r}])
        err = reconstruction_errors(v, factorize_model(v, plan))["conv3"]
        assert err <= prev + 1e-12
        prev = err
    assert prev <= 1e-9 * np.linalg.norm(v.leaf("conv3").params["weight"])


@pytest.mark.parametrize("arch", ["toy_mlp", "toy_cnn", "toy_lstm", "toy_transformer"])
@pytest.mark.parametrize("K", [1, 2, 3])
def test_structure_and_bookkeeping(arch, K):
    v = trained(arch)
    if K > len(v.param_layers) + 1:
        pytest.skip("K past the end")
    plan = make_plan(v, K)
    h = factorize_model(v, plan)
    # idempotence of structure: the output carries exactly the planned ranks
    assert h.ranks() == plan.resolve(v)
    assert h.mode == "hybrid"
    assert h.param_count() == v.param_count() - sum(layer_savings(v, plan).values())


def test_copies_untouched_tensors_and_buffers():
    v = trained()
    h = factorize_model(v, make_plan(v, 2))
    assert np.array_equal(h.leaf("conv1").params["weight"], v.leaf("conv1").params["weight"])
    assert np.array_equal(h.leaf("fc1").params["bias"], v.leaf("fc1").params["bias"])
    for bn in ("bn1", "bn2", "bn3"):
        for k, b in v.leaf(bn).buffers.items():
            assert np.array_equal(h.leaf(bn).buffers[k], b)


def test_factors_balanced():
    v = trained()
    h = factorize_model(v, make_plan(v, 2))
    p = h.leaf("fc1").params
    assert abs(np.linalg.norm(p["weight_u"]) - np.linalg.norm(p["weight_v"])) <= 1e-9


def test_threaded_matches_serial():
    v = trained("toy_cnn")
    plan = make_plan(v, 2)
    a, b = factorize_model(v, plan, workers=1), factorize_model(v, plan, workers=4)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa, pb)


def test_refuses_hybrid_input():
    v = trained()
    h = factorize_model(v, make_plan(v, 2))
    with pytest.raises(PlanError):
        factorize_model(h, make_plan(v, 2))
