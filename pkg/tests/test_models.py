import numpy as np
import pytest

from mebqat.autodiff import Tensor
from mebqat.models import (
    QuantPolicy,
    bn_fraction,
    bn_param_names,
    build_model,
    clone_params,
    forward,
    forward_quantized,
    init_params,
    param_count,
)
from mebqat.quantization import BitwidthTask


def _made(kind, width, shape, seed=0):
    spec = build_model(kind, width, shape)
    params = init_params(spec, np.random.default_rng(seed))
    return spec, params


def test_conv5_head_width_matches_classes():
    spec, params = _made("conv5-maml", 20, (1, 28, 28))
    x = Tensor(np.random.default_rng(1).random((3, 1, 28, 28)).astype(np.float32))
    out = forward(spec, params, x)
    assert out.shape == (3, 20)


def test_conv4_pn_embedding_dim():
    spec, params = _made("conv4-pn", 64, (1, 28, 28))
    assert spec.output_dim == 64
    assert spec.output_role == "embedding"
    x = Tensor(np.random.default_rng(2).random((5, 1, 28, 28)).astype(np.float32))
    assert forward(spec, params, x).shape == (5, 64)


def test_conv8_shape():
    spec, params = _made("conv8", 10, (3, 32, 32))
    x = Tensor(np.random.default_rng(3).random((2, 3, 32, 32)).astype(np.float32))
    assert forward(spec, params, x).shape == (2, 10)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="kind"):
        build_model("resnet", 10, (3, 32, 32))


def test_fp_task_is_bit_exact_plain_forward():
    spec, params = _made("conv8-reduced", 6, (1, 16, 16))
    x = Tensor(np.random.default_rng(4).random((4, 1, 16, 16)).astype(np.float32))
    plain = forward(spec, params, x).data
    quantized = forward_quantized(
        spec, params, x, BitwidthTask.of("FP,FP"), QuantPolicy()
    ).data
    assert np.array_equal(plain, quantized)


def test_two_bit_weights_have_at_most_four_values():
    spec, params = _made("conv8-reduced", 6, (1, 16, 16))
    x = Tensor(np.random.default_rng(5).random((2, 1, 16, 16)).astype(np.float32))
    trace = {}
    forward_quantized(spec, params, x, BitwidthTask.of("2,FP"), QuantPolicy(), trace=trace)
    exempt = spec.exempt_weight_layers(QuantPolicy())
    checked = 0
    for name in spec.weight_layer_names:
        values = np.unique(trace[f"{name}.weight"])
        if name in exempt:
            np.testing.assert_array_equal(trace[f"{name}.weight"], params[f"{name}.weight"].data)
        else:
            assert len(values) <= 4
            checked += 1
    assert checked >= 4


def test_two_bit_activations_live_on_grid():
    spec, params = _made("conv5-maml", 5, (1, 28, 28))
    x = Tensor(np.random.default_rng(6).random((2, 1, 28, 28)).astype(np.float32))
    trace = {}
    forward_quantized(spec, params, x, BitwidthTask.of("FP,2"), QuantPolicy(), trace=trace)
    acts = [v for k, v in trace.items() if k.startswith("act")]
    assert len(acts) == 4
    for act in acts:
        scaled = act.astype(np.float64) * 3.0
        np.testing.assert_allclose(scaled, np.round(scaled), atol=1e-6)


def test_exempt_layers_stay_full_precision_under_any_task():
    spec, params = _made("conv8-reduced", 6, (1, 16, 16))
    x = Tensor(np.random.default_rng(7).random((2, 1, 16, 16)).astype(np.float32))
    for task in ("1,1", "2,4", "8,2"):
        trace = {}
        forward_quantized(spec, params, x, BitwidthTask.of(task), QuantPolicy(), trace=trace)
        first = spec.weight_layer_names[0]
        last = spec.weight_layer_names[-1]
        assert np.array_equal(trace[f"{first}.weight"], params[f"{first}.weight"].data)
        assert np.array_equal(trace[f"{last}.weight"], params[f"{last}.weight"].data)
    # BN parameters are not quantized anywhere: policy cannot even ask for it
    with pytest.raises(ValueError):
        QuantPolicy(quantize_bn=True)


def test_clone_is_memory_independent():
    spec, params = _made("conv5-maml", 5, (1, 28, 28))
    snapshot = {n: t.data.copy() for n, t in params.items()}
    cloned = clone_params(params)
    for t in cloned.values():
        t.data += 1.0
    for name, t in params.items():
        assert np.array_equal(t.data, snapshot[name])


def test_same_seed_same_logits():
    spec1, params1 = _made("conv5-maml", 5, (1, 28, 28), seed=9)
    spec2, params2 = _made("conv5-maml", 5, (1, 28, 28), seed=9)
    x = np.random.default_rng(0).random((2, 1, 28, 28)).astype(np.float32)
    task = BitwidthTask.of("4,4")
    a = forward_quantized(spec1, params1, Tensor(x), task, QuantPolicy()).data
    b = forward_quantized(spec2, params2, Tensor(x), task, QuantPolicy()).data
    assert np.array_equal(a, b)


def test_param_accounting():
    spec = build_model("conv8-reduced", 10, (1, 28, 28))
    total = param_count(spec)
    bn = bn_param_names(spec)
    assert total > 0
    assert all(n.endswith((".scale", ".shift")) for n in bn)
    assert 0.0 < bn_fraction(spec) < 0.05


def test_small_inputs_drop_pools_that_no_longer_fit():
    spec = build_model("conv5-maml", 5, (1, 8, 8))
    pools = [l for l in spec.layers if type(l).__name__ == "MaxPool"]
    assert len(pools) == 3  # 8 -> 4 -> 2 -> 1, no fourth pool
    params = init_params(spec, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).random((2, 1, 8, 8)).astype(np.float32))
    assert forward(spec, params, x).shape == (2, 5)
