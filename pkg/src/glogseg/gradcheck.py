"""Central finite-difference checks for every differentiable path.

Relative error of a gradient array is ``max|a - n| / max(max|a|, max|n|, 1e-8)``
(infinity-norm relative error; elementwise ratios are meaningless where a
true gradient component is zero).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .backbone import BankConfig, BlockConfig, ModelConfig, cst_block, init_block_weights, model_forward, model_init
from .embed import EmbedConfig, embed_forward, init_embed_weights
from .filters import (GaborParams, KernelGrid, LoGParams, FilterBank, bank_apply, bank_param_grad,
                      gabor_kernel, gabor_kernel_grad, log_kernel, log_kernel_grad)
from .tensor import Tape, Tensor, backward

STEP = 1e-4
KERNEL_TOL = 1e-6
OP_TOL = 1e-5
MODEL_TOL = 1e-4


def rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def central_difference(f: Callable[[], float], x: np.ndarray, step: float = STEP,
                       indices=None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros(x.shape)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    cases: int

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def check_tape(build: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = STEP) -> float:
    """Worst relative error of tape gradients of scalar ``build()`` w.r.t. ``inputs``."""
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = build()
    backward(tape, loss, reset=True)
    worst = 0.0
    for t in inputs:
        num = central_difference(lambda: float(build().data), t.data, step)
        ana = t.grad if t.grad is not None else np.zeros(t.shape)
        worst = max(worst, rel_error(ana, num))
    return worst


def _projected(out_fn, rng):
    """Scalar loss ``sum(out * R)`` with a fixed random ``R`` matched to the output."""
    cache = {}

    def build():
        out = out_fn()
        if out.data.ndim == 0:
            return out
        if "r" not in cache:
            cache["r"] = Tensor(rng.uniform(-1, 1, size=out.shape))
        return ops.sum(ops.mul(out, cache["r"]))
    return build


def _u(rng, *shape):
    return Tensor(rng.uniform(-2, 2, size=shape), requires_grad=True)


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (output builder, inputs); inputs drawn uniformly from [-2, 2]."""
    c = {}
    a, b = _u(rng, 3, 4), _u(rng, 3, 4)
    c["add"] = (lambda: ops.add(a, b), [a, b])
    bb = _u(rng, 4)
    c["add_broadcast"] = (lambda: ops.add(a, bb), [a, bb])
    a2, b2 = _u(rng, 3, 4), _u(rng, 3, 4)
    c["sub"] = (lambda: ops.sub(a2, b2), [a2, b2])
    a3, b3 = _u(rng, 2, 3, 4), _u(rng, 3, 1)
    c["mul"] = (lambda: ops.mul(a3, b3), [a3, b3])
    s = _u(rng, 5)
    c["scale"] = (lambda: ops.scale(s, -1.7), [s])
    s2 = _u(rng, 2, 3)
    c["sum"] = (lambda: ops.sum(ops.mul(s2, s2)), [s2])
    s3 = _u(rng, 2, 3)
    c["mean"] = (lambda: ops.mean(ops.mul(s3, s3)), [s3])
    g = _u(rng, 3, 5)
    c["gelu"] = (lambda: ops.gelu(g), [g])
    r = _u(rng, 2, 3, 4)
    c["reshape_transpose"] = (lambda: ops.transpose(ops.reshape(r, (4, 6)), (1, 0)), [r])
    ro = _u(rng, 2, 4, 4)
    c["roll"] = (lambda: ops.roll(ro, (-1, 2), (1, 2)), [ro])
    p1, p2 = _u(rng, 1, 3, 3), _u(rng, 2, 3, 3)
    c["concat_channels"] = (lambda: ops.concat_channels([p1, p2]), [p1, p2])
    m1, m2 = _u(rng, 2, 3, 4), _u(rng, 2, 4, 2)
    c["matmul"] = (lambda: ops.matmul(m1, m2), [m1, m2])
    lx, lw, lb = _u(rng, 2, 3, 4), _u(rng, 4, 3), _u(rng, 3)
    c["linear"] = (lambda: ops.linear(lx, lw, lb), [lx, lw, lb])
    sm = _u(rng, 3, 4)
    c["softmax"] = (lambda: ops.softmax(sm, axis=-1), [sm])
    nx, ng, nb = _u(rng, 2, 4, 3, 3), _u(rng, 4), _u(rng, 4)
    c["layer_norm"] = (lambda: ops.layer_norm(nx, ng, nb), [nx, ng, nb])
    cx, cw, cb = _u(rng, 2, 4, 4), _u(rng, 3, 2, 3, 3), _u(rng, 3)
    c["conv2d"] = (lambda: ops.conv2d(cx, cw, cb), [cx, cw, cb])
    sx, sw = _u(rng, 2, 2, 6, 6), _u(rng, 3, 2, 3, 3)
    c["conv2d_stride2"] = (lambda: ops.conv2d(sx, sw, stride=2), [sx, sw])
    ex, ew, eb = _u(rng, 1, 3, 4, 4), _u(rng, 2, 3, 2, 2), _u(rng, 2)
    c["conv2d_2x2_merge"] = (lambda: ops.conv2d(ex, ew, eb, stride=2, padding=0), [ex, ew, eb])
    px, pw, pb = _u(rng, 2, 3, 3, 3), _u(rng, 2, 3, 1, 1), _u(rng, 2)
    c["conv2d_pointwise"] = (lambda: ops.conv2d(px, pw, pb), [px, pw, pb])
    dx, dw, db = _u(rng, 2, 3, 4, 4), _u(rng, 3, 3, 3), _u(rng, 3)
    c["depthwise_conv2d"] = (lambda: ops.depthwise_conv2d(dx, dw, db), [dx, dw, db])
    mp = _u(rng, 2, 4, 4)
    c["mean_pool"] = (lambda: ops.mean_pool(mp, 2), [mp])
    up = _u(rng, 2, 2, 3)
    c["upsample_nearest"] = (lambda: ops.upsample_nearest(up, 2), [up])
    ce = _u(rng, 2, 3, 3, 3)
    ce_lab = rng.integers(0, 3, size=(2, 3, 3))
    c["softmax_cross_entropy"] = (lambda: ops.softmax_cross_entropy(ce, ce_lab), [ce])
    dl = _u(rng, 2, 3, 3, 3)
    dl_lab = rng.integers(0, 3, size=(2, 3, 3))
    c["dice_loss"] = (lambda: ops.dice_loss(dl, dl_lab), [dl])
    return c


def check_ops(draws: int, seed: int = 0) -> list[CheckResult]:
    worst: dict = {}
    for d in range(draws):
        rng = np.random.default_rng(seed + d)
        for name, (fn, inputs) in op_cases(rng).items():
            err = check_tape(_projected(fn, rng), inputs)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(f"op:{k}", v, OP_TOL, draws) for k, v in worst.items()]


def random_gabor(rng) -> GaborParams:
    return GaborParams(lambda_raw=np.log(rng.uniform(3.0, 10.0)), theta=rng.uniform(-np.pi, np.pi),
                       psi=rng.uniform(-np.pi, np.pi), sigma_raw=np.log(rng.uniform(1.0, 4.0)),
                       gamma_raw=np.log(rng.uniform(0.3, 1.5)))


def random_log(rng) -> LoGParams:
    return LoGParams(np.log(rng.uniform(0.5, 3.0)))


def check_kernels(draws: int, seed: int = 0, size: int = 7) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    grid = KernelGrid(size)
    wg, wl = 0.0, 0.0
    for _ in range(draws):
        p = random_gabor(rng)
        raw = p.raw()
        ana = gabor_kernel_grad(p, grid)
        for i in range(5):
            def f(j=i):
                def kern(v):
                    r = raw.copy()
                    r[j] = v
                    return gabor_kernel(GaborParams(*r), grid)
                return (kern(raw[j] + STEP) - kern(raw[j] - STEP)) / (2 * STEP)
            wg = max(wg, rel_error(ana[i], f()))
        q = random_log(rng)
        num = (log_kernel(LoGParams(q.sigma_raw + STEP), grid)
               - log_kernel(LoGParams(q.sigma_raw - STEP), grid)) / (2 * STEP)
        wl = max(wl, rel_error(log_kernel_grad(q, grid), num))
    return [CheckResult("kernel:gabor", wg, KERNEL_TOL, draws),
            CheckResult("kernel:log", wl, KERNEL_TOL, draws)]


def check_bank(draws: int, seed: int = 0) -> list[CheckResult]:
    """bank_param_grad against finite differences of a random projection of bank_apply."""
    worst = 0.0
    for d in range(draws):
        rng = np.random.default_rng(seed + 1000 + d)
        bank = FilterBank.from_params([random_gabor(rng), random_gabor(rng)], [random_log(rng)], 5)
        image = Tensor(rng.uniform(-2, 2, size=(1, 16, 16)))
        r = rng.uniform(-1, 1, size=(bank.n_filters, 16, 16))

        def loss():
            return float((bank_apply(image, bank).data * r).sum())

        gg, gl = bank_param_grad(r, image, bank)
        worst = max(worst, rel_error(gg, central_difference(loss, bank.gabor.data)),
                    rel_error(gl, central_difference(loss, bank.log.data)))
    return [CheckResult("bank:param_grad", worst, OP_TOL, draws)]


def small_model_config(n_classes: int = 3) -> ModelConfig:
    return ModelConfig(n_classes=n_classes, embed=EmbedConfig(4, 8, ((4, 2), (8, 2))),
                       window=2, heads=2, depth=2, blocks_per_stage=2, bottleneck_blocks=2,
                       head_channels=4)


def check_blocks(draws: int, seed: int = 0) -> list[CheckResult]:
    worst_e, worst_b = 0.0, 0.0
    for d in range(draws):
        rng = np.random.default_rng(seed + 2000 + d)
        bank = FilterBank.from_params([random_gabor(rng)], [random_log(rng)], 5)
        cfg = EmbedConfig(4, 6, ((4, 2), (6, 2)))
        w = init_embed_weights(cfg, 1 + bank.n_filters, rng)
        image = Tensor(rng.uniform(-2, 2, size=(1, 8, 8)))
        fn = _projected(lambda: embed_forward(image, bank, w, cfg), rng)
        worst_e = max(worst_e, check_tape(fn, [bank.gabor, bank.log, w["embed.0.w"], w["embed.1.ln_g"]]))

        bw = init_block_weights(4, rng, "b.")
        for t in bw.values():
            t.data = rng.uniform(-1, 1, size=t.shape)
        tok = Tensor(rng.uniform(-2, 2, size=(4, 4, 4)))
        bcfg = BlockConfig(dim=4, window=2, heads=2, shift=bool(d % 2))
        fn = _projected(lambda: cst_block(tok, bcfg, bw, "b."), rng)
        worst_b = max(worst_b, check_tape(fn, [tok] + [bw[k] for k in ("b.wq", "b.wk", "b.wv", "b.dw", "b.pw")]))
    return [CheckResult("embed_forward", worst_e, MODEL_TOL, draws),
            CheckResult("cst_block", worst_b, OP_TOL, draws)]


def model_param_sample(weights, rng, per_family: int = 2) -> list[tuple[str, int]]:
    """Random scalar coordinates spanning bank, embed, attention, conv and head families."""
    families = {
        "bank": [n for n, _ in weights.named_parameters() if n.startswith("bank.")],
        "embed": [n for n in weights.params if n.startswith("embed.")],
        "attention": [n for n in weights.params if any(n.endswith(s) for s in (".wq", ".wk", ".wv", ".wo"))],
        "conv": [n for n in weights.params if any(n.endswith(s) for s in (".dw", ".pw", "merge_w", "fuse_w", "up_w"))],
        "head": [n for n in weights.params if n.startswith("head.")],
    }
    named = dict(weights.named_parameters())
    picks = []
    for names in families.values():
        names = [n for n in names if named[n].size]
        for _ in range(per_family):
            name = names[int(rng.integers(len(names)))]
            picks.append((name, int(rng.integers(named[name].size))))
    return picks


def check_model(draws: int, seed: int = 0, per_family: int = 2) -> list[CheckResult]:
    worst, cases = 0.0, 0
    for d in range(draws):
        rng = np.random.default_rng(seed + 3000 + d)
        weights = model_init(3, small_model_config(3), BankConfig(2, 2, 5), seed=seed + d)
        # move off the symmetric initialization so every family carries signal
        for t in weights.parameters():
            t.data = t.data + rng.normal(0, 0.05, size=t.shape)
        image = Tensor(rng.uniform(-2, 2, size=(2, 1, 32, 32)))
        labels = rng.integers(0, 3, size=(2, 32, 32))

        def build():
            lg = model_forward(image, weights)
            return ops.add(ops.scale(ops.softmax_cross_entropy(lg, labels), 0.5),
                           ops.scale(ops.dice_loss(lg, labels), 0.5))

        with Tape() as tape:
            loss = build()
        backward(tape, loss, reset=True)
        named = dict(weights.named_parameters())
        picks = model_param_sample(weights, rng, per_family)
        ana = np.array([named[n].grad.reshape(-1)[i] for n, i in picks])
        num = np.array([central_difference(lambda: float(build().data), named[n].data, indices=[i]).reshape(-1)[i]
                        for n, i in picks])
        for a, b in zip(ana, num):
            worst = max(worst, rel_error(a, b))
        cases += len(picks)
    return [CheckResult("model_forward", worst, MODEL_TOL, cases)]


def run_all(full: bool = False, seed: int = 0) -> list[CheckResult]:
    if full:
        return (check_kernels(100, seed) + check_ops(10, seed) + check_bank(5, seed)
                + check_blocks(4, seed) + check_model(3, seed))
    return (check_kernels(20, seed) + check_ops(1, seed) + check_bank(1, seed)
            + check_blocks(1, seed) + check_model(1, seed))
