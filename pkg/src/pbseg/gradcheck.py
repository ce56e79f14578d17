"""Central finite-difference oracle for the reverse-mode engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(
    f: Callable[[], Tensor],
    param: Tensor,
    step: float = 1e-5,
    coords: np.ndarray | None = None,
) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``param`` (in place).

    ``coords`` restricts the probe to a subset of flat indices; other
    entries of the result stay zero.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    probe = range(flat.size) if coords is None else coords
    with no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)`` over the probed entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    probes: int
    max_abs_diff: float = 0.0
    max_abs_grad: float = 0.0


def combined_error(results: Sequence[GradCheckResult], floor: float = 1e-8) -> float:
    """Largest deviation over all probed entries, relative to the largest
    gradient magnitude among them. Parameters whose true gradient is zero
    (e.g. a key bias under softmax) are judged against the whole group."""
    diff = max((r.max_abs_diff for r in results), default=0.0)
    scale = max((r.max_abs_grad for r in results), default=0.0)
    return diff / max(scale, floor)


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    step: float = 1e-5,
    max_probes: int | None = None,
    rng: np.random.Generator | None = None,
    grad_hook: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> list[GradCheckResult]:
    """Compare backward() gradients of ``f`` against finite differences.

    With ``max_probes`` set, each parameter is probed at that many random
    flat positions instead of exhaustively.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    f().backward()
    results = []
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        if grad_hook is not None:
            analytic = grad_hook(name, analytic)
        coords = None
        if max_probes is not None and p.size > max_probes:
            coords = rng.choice(p.size, size=max_probes, replace=False)
        numeric = numerical_grad(f, p, step, coords)
        if coords is not None:
            a, n = analytic.reshape(-1)[coords], numeric.reshape(-1)[coords]
        else:
            a, n = analytic, numeric
        a, n = np.ravel(a), np.ravel(n)
        results.append(
            GradCheckResult(
                name,
                relative_error(a, n),
                a.size,
                float(np.abs(a - n).max(initial=0.0)),
                float(max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))),
            )
        )
    return results


# --------------------------------------------------------------------------
# component suite used by ``pbseg gradcheck``
# --------------------------------------------------------------------------

SUITE = ("pbca", "cam", "deform_conv", "pyramid", "losses", "model")


def _weighted_sum(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.normal(size=shape))
    return lambda out: (out * w).sum()


def _named(module, extra: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
    params = dict(module.named_parameters())
    params.update(extra or {})
    return params


def _case_pbca(rng):
    from .attention import PBCAParams, pbca_forward

    D, L = 4, 2
    params = PBCAParams(rng, D, heads=1)
    O = Tensor(rng.normal(size=(L, D)), requires_grad=True)
    R = Tensor(rng.normal(size=(D, 2, 2)), requires_grad=True)
    N = np.array([[0.0, 0.0, -np.inf, 0.0], [0.0, -np.inf, 0.0, 0.0]])
    obj = _weighted_sum(rng, (L, D))
    return (lambda: obj(pbca_forward(O, R, N, params)[0])), _named(params, {"queries": O, "features": R})


def _case_cam(rng):
    from .pixel_decoder import ContextModulation

    cam = ContextModulation(rng, 8)
    x = Tensor(rng.normal(size=(8, 4, 4)), requires_grad=True)
    obj = _weighted_sum(rng, (8, 4, 4))
    return (lambda: obj(cam(x))), _named(cam, {"input": x})


def _case_deform(rng):
    from .pixel_decoder import DeformConv

    dc = DeformConv(rng, 3)
    dc.offset.weight.data[...] = rng.normal(0.0, 0.3, size=dc.offset.weight.shape)
    dc.offset.bias.data[...] = rng.normal(0.0, 0.3, size=dc.offset.bias.shape)
    x = Tensor(rng.normal(size=(3, 5, 5)), requires_grad=True)
    obj = _weighted_sum(rng, (3, 5, 5))
    return (lambda: obj(dc(x))), _named(dc, {"input": x})


def _case_pyramid(rng):
    from .pixel_decoder import DeformConv, PixelDecoder

    chans = (3, 4, 5, 6)
    dec = PixelDecoder(rng, chans, 8)
    for f in dec.fuse:
        if isinstance(f, DeformConv):
            f.offset.weight.data[...] = rng.normal(0.0, 0.1, size=f.offset.weight.shape)
    feats = [Tensor(rng.normal(size=(c, 16 >> i, 16 >> i)), requires_grad=True) for i, c in enumerate(chans)]
    objs = [_weighted_sum(rng, (8, 16 >> i, 16 >> i)) for i in range(4)]

    def f():
        levels = dec(feats).levels
        out = objs[0](levels[0])
        for o, lv in zip(objs[1:], levels[1:]):
            out = out + o(lv)
        return out

    return f, _named(dec, {f"E{i + 1}": t for i, t in enumerate(feats)})


def _case_losses(rng):
    from .losses import LossWeights, Targets, layer_loss
    from .matching import MatchResult
    from .model import MaskPrediction

    L, C, h = 4, 3, 4
    cls = Tensor(rng.normal(size=(L, C + 1)), requires_grad=True)
    masks = Tensor(rng.normal(size=(L, h, h)), requires_grad=True)
    raster = rng.integers(0, C, size=(h, h))
    targets = Targets.from_raster(raster, C)
    match = MatchResult(rng.permutation(L)[: len(targets.labels)], 0.0)
    pred = MaskPrediction(cls, masks)
    return (lambda: layer_loss(pred, targets, match, LossWeights())), {"class_logits": cls, "mask_logits": masks}


def _case_model(rng):
    from .attention import DecisionTape, decision_tape
    from .data import generate_scene
    from .losses import LossWeights, compute_loss
    from .model import ModelConfig, PBSeg
    from .train import sample_targets

    cfg = ModelConfig(
        num_queries=4, hidden_dim=8, heads=2, layers=3, num_classes=3, height=32, width=32,
        backbone_channels=(4, 4, 8, 8), ffn_dim=8,
    )
    model = PBSeg(cfg, seed=int(rng.integers(1 << 30)))
    for f in model.pixel_decoder.fuse:
        f.offset.weight.data[...] = rng.normal(0.0, 0.05, size=f.offset.weight.shape)
    # zero biases put dead ReLU units exactly on their kink
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.normal(0.0, 0.05, size=p.shape)
    scene = generate_scene(int(rng.integers(1 << 30)), 32, 32, 3)
    image = Tensor(scene.image)
    targets = sample_targets(scene)
    weights = LossWeights.from_config(cfg)
    tape = DecisionTape()
    with no_grad(), decision_tape(tape):
        _, matches = compute_loss(model(image), targets, weights)

    def f():
        tape.rewind()
        with decision_tape(tape):
            return compute_loss(model(image), targets, weights, matches)[0]

    return f, _named(model)


_CASES = {
    "pbca": _case_pbca,
    "cam": _case_cam,
    "deform_conv": _case_deform,
    "pyramid": _case_pyramid,
    "losses": _case_losses,
    "model": _case_model,
}


def run_suite(
    components: Sequence[str] = SUITE,
    seed: int = 0,
    max_probes: int = 3,
    fault: str | None = None,
) -> dict[str, float]:
    """Max relative error per component. ``fault`` flips the sign of that
    component's analytic gradients (mutation check of the harness)."""
    out = {}
    for i, name in enumerate(components):
        rng = np.random.default_rng([seed, i])
        f, params = _CASES[name](rng)
        hook = (lambda _n, g: -g) if fault == name else None
        results = check_gradients(f, params, max_probes=max_probes, rng=rng, grad_hook=hook)
        out[name] = combined_error(results)
    return out
