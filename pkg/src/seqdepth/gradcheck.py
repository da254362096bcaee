"""Finite-difference self-check suite for every differentiable primitive and the full network."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .network import DepthNet, NetworkConfig, depth_to_target, frame_to_input
from .tensor import ConvSpec

PRIMITIVE_TOL = 1e-4
NETWORK_TOL = 1e-3


@dataclass
class SuiteResult:
    name: str
    report: ad.CheckReport

    @property
    def passed(self):
        return self.report.passed

    def to_dict(self):
        r = self.report
        return {"name": self.name, "passed": r.passed, "max_rel_error": r.max_rel_error,
                "tol": r.tol, "checked": len(r.checked), "kinks": r.n_kinks,
                "nonfinite": len(r.nonfinite)}


def _probe(op):
    """Contract a tensor-valued builder to a scalar via a fixed random projection."""
    cache = {}

    def build(*args):
        out = op(*args)
        shape = ad.value(out).shape
        if shape not in cache:
            cache[shape] = np.random.default_rng(len(cache) + 7).standard_normal(shape)
        return ad.total(ad.mul(out, cache[shape]))
    return build


def primitive_cases(rng):
    """(name, builder, inputs) for each primitive on small random tensors."""
    r = rng.standard_normal
    s1, s2 = ConvSpec.same(3, 1), ConvSpec.same(3, 2)
    y = r((3, 6, 6))
    return [
        ("conv2d", _probe(lambda x, w, b: ad.conv2d(x, w, b, s1)), [r((2, 6, 6)), r((3, 2, 3, 3)), r(3)]),
        ("conv2d_stride2", _probe(lambda x, w, b: ad.conv2d(x, w, b, s2)), [r((2, 6, 6)), r((3, 2, 3, 3)), r(3)]),
        ("conv2d_1x1", _probe(lambda x, w, b: ad.conv2d(x, w, b, ConvSpec((1, 1)))), [r((4, 3, 3)), r((2, 4, 1, 1)), r(2)]),
        ("conv2d_l1", lambda x, w: ad.l1(ad.conv2d(x, w, None, s1), y), [r((2, 6, 6)), r((3, 2, 3, 3))]),
        ("depth_to_space", _probe(lambda x: ad.depth_to_space(x, 2)), [r((8, 3, 3))]),
        ("lrelu", _probe(lambda x: ad.lrelu(x, 0.1)), [r((2, 5, 5))]),
        ("lrelu_paper_verbatim", _probe(lambda x: ad.lrelu(x, 0.1, "paper_verbatim")), [r((2, 5, 5))]),
        ("sigmoid", _probe(ad.sigmoid), [r((2, 5, 5))]),
        ("tanh", _probe(ad.tanh), [r((2, 5, 5))]),
        ("add", _probe(ad.add), [r((2, 4, 4)), r((2, 4, 4))]),
        ("sub", _probe(ad.sub), [r((2, 4, 4)), r((2, 4, 4))]),
        ("mul", _probe(ad.mul), [r((2, 4, 4)), r((2, 4, 4))]),
        ("scale", _probe(lambda x: ad.scale(x, -1.7)), [r((2, 4, 4))]),
        ("channels", _probe(lambda x: ad.channels(x, 1, 3)), [r((4, 3, 3))]),
        ("add_n", _probe(lambda a, b, c: ad.add_n([a, b, c])), [r((2, 3, 3)), r((2, 3, 3)), r((2, 3, 3))]),
        ("l1", lambda a: ad.l1(a, y), [r((3, 6, 6))]),
        ("total", ad.total, [r((2, 3, 3))]),
    ]


def network_case(rng, frames=3, config=None):
    """Builder for the full network plus L1 loss over a short sequence, parameters as inputs."""
    config = config or NetworkConfig()
    net = DepthNet(config, dtype=np.float64).init_params(rng)
    # nudge every parameter off the zero-bias init so few units sit on a kink
    for v in net.params.values():
        v += 0.01 * rng.standard_normal(v.shape)
    names = list(net.params)
    h, w = config.height, config.width
    xs = [frame_to_input(rng.integers(0, 256, (3, h, w), dtype=np.uint8), np.float64) for _ in range(frames)]
    ys = [depth_to_target(rng.integers(0, 256, (h, w), dtype=np.uint8), np.float64) for _ in range(frames)]

    def build(*params):
        for k, p in zip(names, params):
            net.params[k] = p
        net.reset_state()
        outs = [net.forward_frame(x) for x in xs]
        return ad.scale(ad.add_n([ad.l1(o, y) for o, y in zip(outs, ys)]), 1.0 / frames)

    return names, build, [net.params[k].copy() for k in names]


def check_primitives(seed=0, epsilon=1e-3, tol=PRIMITIVE_TOL):
    rng = np.random.default_rng(seed)
    return [SuiteResult(name, ad.grad_check(b, xs, epsilon=epsilon, tol=tol, seed=seed))
            for name, b, xs in primitive_cases(rng)]


def check_network(seed=0, epsilon=1e-3, tol=NETWORK_TOL, per_tensor=8, frames=3, config=None):
    rng = np.random.default_rng(seed)
    _, build, xs = network_case(rng, frames, config)
    rep = ad.grad_check(build, xs, epsilon=epsilon, tol=tol, max_checks=per_tensor, seed=seed)
    return SuiteResult("network", rep)


def run_suite(seed=0, network=True, per_tensor=8):
    results = check_primitives(seed)
    if network:
        results.append(check_network(seed, per_tensor=per_tensor))
    return results


@contextlib.contextmanager
def inject_fault(op="conv2d", factor=1.05):
    """Test hook: scale the weight gradient of ``op`` so the checker must catch it."""
    if op != "conv2d":
        raise ValueError(f"no fault hook for {op!r}")
    original = ad.conv2d

    def faulty(x, w, b, spec):
        out = original(x, w, b, spec)
        if isinstance(out, ad.Node):
            bwd = out._bwd

            def wrong(g, needs):
                gx, gw, gb = bwd(g, needs)
                return gx, None if gw is None else gw * factor, gb
            out._bwd = wrong
        return out

    ad.conv2d = faulty
    try:
        yield
    finally:
        ad.conv2d = original
