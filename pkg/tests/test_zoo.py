import numpy as np
import pytest

from tumortriage.errors import DataInvariantError
from tumortriage.nn.gradcheck import check_model
from tumortriage.nn.layers import InvertedResidual, ReLU, ReLU6, ResidualBottleneck, Sequence
from tumortriage.zoo import ArchitectureId, build, flops_estimate, param_count

ARCHS = list(ArchitectureId)

# enumerated once from the built graphs; the README width table quotes these
PARAMS_AT_64 = {"mobile": 19_554, "res50": 60_946, "res101": 119_522, "vgg": 424_786}


def _activations(layers):
    for layer in layers:
        if isinstance(layer, Sequence):
            yield from _activations(child for _, child in layer.children())
            if isinstance(layer, ResidualBottleneck):
                yield layer._act
        elif isinstance(layer, (ReLU, ReLU6)):
            yield layer


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("size", [32, 64, 96])
def test_forward_on_zeros_gives_two_finite_logits(arch, size):
    m = build(arch, size)
    out = m.forward(np.zeros((1, size, size, 3), np.float32))
    assert out.shape == (1, 2) and np.isfinite(out).all()
    assert m.input_shape == (size, size, 3)


def test_parameter_counts_and_ordering():
    counts = {a.value: param_count(build(a, 64)) for a in ARCHS}
    assert counts == PARAMS_AT_64
    assert counts["mobile"] < counts["res50"] < counts["res101"] < counts["vgg"]
    for a in ARCHS:
        m = build(a, 64)
        assert m.formula_param_count() == m.param_count()
        assert m.param_count() < 2_000_000


@pytest.mark.parametrize("size", [32, 96])
def test_ordering_holds_at_other_sizes(size):
    counts = [param_count(build(a, size)) for a in
              (ArchitectureId.MOBILE, ArchitectureId.RES50, ArchitectureId.RES101,
               ArchitectureId.VGG)]
    assert counts == sorted(counts) and len(set(counts)) == 4


def test_mobile_is_cheapest_in_flops():
    flops = {a: flops_estimate(build(a, 64), 64) for a in ARCHS}
    assert flops[ArchitectureId.MOBILE] == min(flops.values())
    assert flops[ArchitectureId.MOBILE] < flops[ArchitectureId.VGG]
    with pytest.raises(DataInvariantError):
        flops_estimate(build("mobile", 64), 32)


@pytest.mark.parametrize("arch", ARCHS)
def test_same_seed_same_weights(arch):
    a, b, c = build(arch, 32, seed=4), build(arch, 32, seed=4), build(arch, 32, seed=5)
    for p, q in zip(a.params, b.params):
        for k in p:
            np.testing.assert_array_equal(p[k], q[k])
    assert any(not np.array_equal(p[k], q[k]) for p, q in zip(a.params, c.params) for k in p)


def test_activation_conventions():
    mobile = list(_activations(build("mobile", 32).layers))
    assert mobile and all(isinstance(a, ReLU6) for a in mobile)
    assert any(isinstance(layer, InvertedResidual) for layer in build("mobile", 32).layers)
    for arch in ("vgg", "res50", "res101"):
        acts = list(_activations(build(arch, 32).layers))
        assert acts and all(type(a) is ReLU for a in acts)


def test_unknown_arch_and_size():
    with pytest.raises(ValueError):
        build("alexnet", 64)
    with pytest.raises(DataInvariantError):
        build("mobile", 48)


def test_block_depths():
    def count(arch, kind):
        return sum(isinstance(layer, kind) for layer in build(arch, 32).layers)

    assert count("res50", ResidualBottleneck) == 8
    assert count("res101", ResidualBottleneck) == 16
    assert count("mobile", InvertedResidual) == 4


@pytest.mark.parametrize("arch", ARCHS)
def test_end_to_end_gradient_on_one_percent_sample(arch):
    rng = np.random.default_rng(0)
    m = build(arch, 32, seed=0)
    x = rng.uniform(-1, 1, (1, 32, 32, 3))
    assert check_model(m, x, np.array([1]), rng, fraction=0.01) < 1e-3
