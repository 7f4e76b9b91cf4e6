import numpy as np
import pytest

from railnet import graph as G
from railnet.fuse import fuse_pass
from railnet.imgpipe import synthetic_images
from railnet.quant import calibrate, plan_formats, quantize_model
from railnet.tensor import Tensor

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_residual_model(rng, h=6, w=6, c=2, width=3, classes=2, stride=1):
    """Conv/BN/ReLU stem, one residual block, pool, GAP, dense."""
    def conv(name, k, cin, cout, s=1, pad="same"):
        return G.Conv2D(name, rng.normal(0, 0.6, (k, k, cin, cout)), rng.normal(0, 0.1, cout),
                        stride=s, pad=pad)

    def bn(name, ch):
        return G.BatchNorm(name, rng.uniform(0.5, 1.5, ch), rng.normal(0, 0.2, ch),
                           rng.normal(0, 0.2, ch), rng.uniform(0.5, 2.0, ch), 1e-5)

    layers = [
        conv("stem", 3, c, width, s=stride), bn("stem.bn", width), G.ReLU("stem.relu"),
        conv("b.c1", 3, width, width), bn("b.c1.bn", width), G.ReLU("b.c1.relu"),
        conv("b.c2", 1, width, width), bn("b.c2.bn", width),
        G.ResidualAdd("b.add", source="stem.relu"), G.ReLU("b.relu"),
        G.MaxPool("pool", 2, 2), G.GlobalAvgPool("gap"),
        G.Dense("fc", rng.normal(0, 0.7, (width, classes)), rng.normal(0, 0.1, classes)),
        G.Softmax("softmax"),
    ]
    return G.ModelGraph(tuple(layers), (1, h, w, c), tuple(f"c{i}" for i in range(classes)))


def random_images(rng, shape, n):
    return [Tensor(rng.uniform(0, 1, shape)) for _ in range(n)]


@pytest.fixture(scope="session")
def canonical():
    return G.canonical_railnet(42)


@pytest.fixture(scope="session")
def canonical_fused(canonical):
    return fuse_pass(canonical)


@pytest.fixture(scope="session")
def calib_images():
    return synthetic_images(50, seed=1)


@pytest.fixture(scope="session")
def heldout_images():
    return synthetic_images(100, seed=2)


@pytest.fixture(scope="session")
def canonical_fx(canonical_fused, calib_images):
    plan = plan_formats(calibrate(canonical_fused, calib_images))
    return quantize_model(canonical_fused, plan)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_conv_case(rng, width):
    """A single conv inside a minimal valid graph with hand-picked random Q-formats.

    Returns ``(fxm, conv, x_raw, in_q, cfg)``; ``cfg`` is a random TileConfig.
    """
    from railnet.fxp import QFormat
    from railnet.quant import LayerFormats, QuantPlan
    from railnet.tile import TileConfig

    k = int(rng.choice([1, 2, 3, 5]))
    stride = int(rng.choice([1, 2]))
    pad = str(rng.choice(["same", "valid"]))
    cin, cout = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    h, w = int(rng.integers(k, 13)), int(rng.integers(k, 13))
    conv = G.Conv2D("conv", rng.normal(0, 1, (k, k, cin, cout)), rng.normal(0, 1, cout),
                    stride=stride, pad=pad, relu=bool(rng.integers(2)))
    layers = (conv, G.GlobalAvgPool("gap"), G.Dense("fc", rng.normal(size=(cout, 2)), np.zeros(2)),
              G.Softmax("softmax"))
    model = G.ModelGraph(layers, (1, h, w, cin), ("a", "b"))

    def q(bits):
        return QFormat(bits, int(rng.integers(0, bits)))

    in_q, wq, bq, aq = q(width), q(width), q(int(rng.choice([16, 22, 32]))), q(width)
    fc_w = q(width)
    plan = QuantPlan(in_q, {
        "conv": LayerFormats(aq, wq, bq, in_q.frac_bits + wq.frac_bits),
        "gap": LayerFormats(aq),
        "fc": LayerFormats(q(width), fc_w, bq, aq.frac_bits + fc_w.frac_bits),
        "softmax": LayerFormats(q(width)),
    })
    from railnet.quant import quantize_model
    fxm = quantize_model(model, plan)
    x = rng.integers(in_q.raw_min, in_q.raw_max + 1, (1, h, w, cin))
    g = G.conv_geometry(h, w, (k, k), stride, pad)
    cfg = TileConfig(int(rng.integers(1, cout + 1)), int(rng.integers(1, cin + 1)),
                     int(rng.integers(1, g.out_h + 1)), int(rng.integers(1, g.out_w + 1)))
    return fxm, conv, x, in_q, cfg
