"""Central finite-difference checks for every differentiable piece.

Each check returns a :class:`CheckResult`. ReLU / max-pool networks are
piecewise linear, and at 10^4 units some unit almost always sits within one
step of its kink. Network checks therefore pin the activation pattern of the
unperturbed input and difference the resulting linear piece, which is
exactly the function the backward pass differentiates. Elementwise ops are
checked on inputs kept away from their kinks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .baselines import ConvLSTMCell
from .nets import ArchConfig, build_nets

STEP = 1e-3
PENALTY_STEP = 1e-4  # the penalty is already a derivative; 1e-3 leaves O(h^2) error near tolerance
RTOL = 1e-4
ATOL = 1e-9


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} max rel err {self.max_rel_error:.2e}  ({self.n_checked} entries)"


def rel_error(a: float, b: float) -> float:
    den = max(abs(a), abs(b))
    if den < ATOL:
        return 0.0
    return abs(a - b) / den


def fd_check(name: str, f, arr: np.ndarray, analytic: np.ndarray, entries=None, step: float = STEP,
             rtol: float = RTOL) -> CheckResult:
    """Compare ``analytic`` with central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place)."""
    if entries is None:
        entries = list(np.ndindex(arr.shape))
    worst, checked = 0.0, 0
    for ix in entries:
        old = arr[ix]
        arr[ix] = old + step
        fp = f()
        arr[ix] = old - step
        fm = f()
        arr[ix] = old
        num = (fp - fm) / (2 * step)
        worst = max(worst, rel_error(num, float(analytic[ix])))
        checked += 1
    return CheckResult(name, worst, checked, worst <= rtol and checked > 0)


def _sample_entries(rng, shape, k):
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(k, total), replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


# --------------------------------------------------------------------------
# single operators


def check_conv2d(rng) -> list[CheckResult]:
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    wts = rng.standard_normal((3, 5, 5))
    f = lambda: float((nc.conv2d_forward(x, w, b, 1)[0] * wts).sum())  # noqa: E731
    out, cache = nc.conv2d_forward(x, w, b, 1)
    dx, dw, db = nc.conv2d_backward(wts, cache)
    return [fd_check("conv2d input", f, x, dx), fd_check("conv2d weights", f, w, dw), fd_check("conv2d bias", f, b, db)]


def check_fc(rng) -> list[CheckResult]:
    x = rng.standard_normal((3, 8))
    w = rng.standard_normal((4, 8))
    b = rng.standard_normal(4)
    wts = rng.standard_normal((3, 4))
    f = lambda: float((nc.fc_forward(x, w, b)[0] * wts).sum())  # noqa: E731
    _, cache = nc.fc_forward(x, w, b)
    dx, dw, db = nc.fc_backward(wts, cache)
    return [fd_check("fc input", f, x, dx), fd_check("fc weights", f, w, dw), fd_check("fc bias", f, b, db)]


def check_activations(rng) -> list[CheckResult]:
    # keep relu inputs away from the kink by more than the step
    x = rng.standard_normal(20)
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    wts = rng.standard_normal(20)
    out, mask = nc.relu_forward(x)
    r1 = fd_check("relu", lambda: float((nc.relu_forward(x)[0] * wts).sum()), x, nc.relu_backward(wts, mask))
    xs = rng.standard_normal(20) * 3
    s, sc = nc.sigmoid_forward(xs)
    r2 = fd_check("sigmoid", lambda: float((nc.sigmoid(xs) * wts).sum()), xs, nc.sigmoid_backward(wts, sc))
    xp = rng.permutation(2 * 6 * 6).reshape(2, 6, 6).astype(float) * 0.1  # distinct values: unique argmax
    wp = rng.standard_normal((2, 3, 3))
    _, pc = nc.maxpool2_forward(xp)
    r3 = fd_check("maxpool2", lambda: float((nc.maxpool2_forward(xp)[0] * wp).sum()), xp, nc.maxpool2_backward(wp, pc))
    return [r1, r2, r3]


def check_losses(rng) -> list[CheckResult]:
    z = rng.standard_normal((2, 12))
    wts = rng.standard_normal((2, 12))
    lp = nc.log_softmax(z)
    p = np.exp(lp)
    # d/dz sum(w * log_softmax(z)) = w - p * sum(w)
    g = wts - p * wts.sum(axis=1, keepdims=True)
    r1 = fd_check("log-softmax", lambda: float((nc.log_softmax(z) * wts).sum()), z, g)
    t = rng.random((2, 12))
    t /= t.sum(axis=1, keepdims=True)
    _, gk = nc.kl_logits_grad(z, t)
    r2 = fd_check("KL to target", lambda: float(nc.kl_logits_grad(z, t)[0].sum()), z, gk)
    pred = np.array([0.3, -2.5, 0.9, 4.0])
    _, gl = nc.smoothed_l1(pred, 0.0)
    r3 = fd_check("smoothed L1", lambda: float(nc.smoothed_l1(pred, 0.0)[0].sum()), pred, gl)
    return [r1, r2, r3]


def check_rl_losses(rng) -> list[CheckResult]:
    from .gail import discriminator_loss, ppo_policy_loss, value_loss

    n, a = 4, 640
    z = rng.standard_normal((n, a)) * 0.3
    allowed = rng.random((n, a)) > 0.05
    acts = np.array([int(np.flatnonzero(allowed[i])[i]) for i in range(n)])
    old = nc.log_softmax(z + rng.standard_normal(z.shape) * 0.02, allowed)[np.arange(n), acts]
    adv = rng.standard_normal(n)
    _, g, _ = ppo_policy_loss(z, allowed, acts, old, adv, 0.2, 0.05)
    ent = [(i, int(acts[i])) for i in range(n)] + [(i, int(j)) for i in range(n) for j in rng.choice(a, 4)]
    r1 = fd_check("clipped surrogate + entropy", lambda: ppo_policy_loss(z, allowed, acts, old, adv, 0.2, 0.05)[0],
                  z, g, ent)
    v = np.array([0.2, -1.7, 3.0])
    ret = np.array([0.0, 0.0, 0.5])
    _, gv = value_loss(v, ret)
    r2 = fd_check("value loss", lambda: value_loss(v, ret)[0], v, gv)

    disc = build_nets(4, rng, ArchConfig((3, 3, 2), (2, 3), 3))["discriminator"]
    real = (rng.random((3, 4, 20, 32)), rng.integers(0, 18, 3), rng.integers(0, 640, 3))
    fake = (rng.random((3, 4, 20, 32)), rng.integers(0, 18, 3), rng.integers(0, 640, 3))
    pinned = _PinnedNet(disc, {id(real[0]): disc.gate_pattern(disc.forward(*real[:2])[1]),
                               id(fake[0]): disc.gate_pattern(disc.forward(*fake[:2])[1])})
    _, gd, _ = discriminator_loss(pinned, real, fake, 0.0)
    out = [r1, r2]
    for name in ("conv0.w", "conv2.b", "conv3.w"):
        arr = disc.params[name]
        out.append(fd_check(f"discriminator loss {name}", lambda: discriminator_loss(pinned, real, fake, 0.0)[0],
                            arr, gd[name], _sample_entries(rng, arr.shape, 4)))
    return out


class _PinnedNet:
    """Forwards with the gate pattern recorded for each known input batch."""

    def __init__(self, net, gates):
        self.net, self.gates = net, gates

    def forward(self, x, t):
        return self.net.forward(x, t, self.gates[id(x)])

    def __getattr__(self, name):
        return getattr(self.net, name)


def check_task_bias(rng) -> list[CheckResult]:
    nets = build_nets(4, rng, ArchConfig((3, 3, 2), (2, 3), 3))
    pol = nets["policy"]
    for name in pol.params:
        if name.endswith(".task"):
            pol.params.params[name][...] = rng.standard_normal(pol.params[name].shape) * 0.1
    x = rng.random((3, 4, 20, 32))
    t = np.array([1, 4, 1])
    wts = rng.standard_normal((3, 640))
    logits, cache = pol.forward(x, t)
    g, _ = pol.backward(wts, cache)
    gates = pol.gate_pattern(cache)
    f = lambda: float((pol.forward(x, t, gates)[0] * wts).sum())  # noqa: E731
    out = []
    for i in range(len(pol.spec.convs)):
        name = f"conv{i}.task"
        out.append(fd_check(f"task bias layer {i}", f, pol.params.params[name], g[name]))
    return out


# --------------------------------------------------------------------------
# networks


def _all_param_checks(label, net, f, grads, rng, per_tensor, step=STEP):
    out = []
    for name, arr in net.params.params.items():
        if name.endswith(".task"):
            continue
        entries = _sample_entries(rng, arr.shape, per_tensor)
        out.append(fd_check(f"{label} {name}", f, arr, grads[name], entries, step))
    return out


def check_networks(rng, per_tensor: int = 6) -> list[CheckResult]:
    """Policy, critic and discriminator (with its gradient penalty) at C = 4 input channels."""
    nets = build_nets(4, rng, ArchConfig((8, 6, 4), (4, 6), 8))
    x = rng.random((2, 4, 20, 32))
    t = np.array([0, 7])
    out = []

    pol = nets["policy"]
    wts = rng.standard_normal((2, 640))
    logits, cache = pol.forward(x, t)
    g, dx = pol.backward(wts, cache, need_dx=True)
    gates = pol.gate_pattern(cache)
    f = lambda: float((pol.forward(x, t, gates)[0] * wts).sum())  # noqa: E731
    out += _all_param_checks("policy", pol, f, g, rng, per_tensor)
    out.append(fd_check("policy input", f, x, dx, _sample_entries(rng, x.shape, 3 * per_tensor)))

    crit = nets["critic"]
    wv = rng.standard_normal(2)
    v, cache = crit.forward(x, t)
    g, dx = crit.backward(wv, cache, need_dx=True)
    gates = crit.gate_pattern(cache)
    f = lambda: float((crit.forward(x, t, gates)[0] * wv).sum())  # noqa: E731
    out += _all_param_checks("critic", crit, f, g, rng, per_tensor)
    out.append(fd_check("critic input", f, x, dx, _sample_entries(rng, x.shape, 3 * per_tensor)))

    disc = nets["discriminator"]
    a = np.array([13, 500])
    pw = np.array([0.7, 1.3])
    logits, cache = disc.forward(x, t)
    gates = disc.gate_pattern(cache)
    _, g = disc.input_grad_penalty(x, t, a, pw)
    f = lambda: float((disc.input_grad_penalty(x, t, a, pw, gates=gates)[0] * pw).sum())  # noqa: E731
    out += _all_param_checks("disc penalty", disc, f, g, rng, per_tensor, PENALTY_STEP)
    wl = rng.standard_normal((2, 640))
    g, _ = disc.backward(wl, cache)
    f = lambda: float((disc.forward(x, t, gates)[0] * wl).sum())  # noqa: E731
    out += _all_param_checks("discriminator", disc, f, g, rng, per_tensor)
    return out


def check_penalty_value(rng) -> list[CheckResult]:
    """The penalty equals the squared norm of the numerical input gradient of D."""
    nets = build_nets(4, rng, ArchConfig((6, 4, 3), (4, 6), 8))
    disc = nets["discriminator"]
    x = rng.random((1, 4, 20, 32))
    t = np.array([3])
    a = np.array([222])
    pen, _ = disc.input_grad_penalty(x, t, a)
    gates = disc.gate_pattern(disc.forward(x, t)[1])

    def d_of_x():
        z, _ = disc.forward(x, t, gates)
        return float(nc.sigmoid(z[0, a[0]]))

    g = np.zeros_like(x)
    for ix in np.ndindex(x.shape):
        old = x[ix]
        x[ix] = old + STEP
        fp = d_of_x()
        x[ix] = old - STEP
        fm = d_of_x()
        x[ix] = old
        g[ix] = (fp - fm) / (2 * STEP)
    err = rel_error(float(pen[0]), float((g ** 2).sum()))
    return [CheckResult("penalty = |dD/dx|^2", err, 1, err <= RTOL)]


def check_convlstm(rng) -> list[CheckResult]:
    cell = ConvLSTMCell.create(3, 2, rng)
    cell.params.params["lstm.b"][...] = rng.standard_normal(8) * 0.1
    x = rng.random((2, 3, 20, 32))
    h0 = rng.standard_normal((2, 2, 20, 32)) * 0.5
    c0 = rng.standard_normal((2, 2, 20, 32)) * 0.5
    wh = rng.standard_normal(h0.shape)
    wc = rng.standard_normal(c0.shape)

    def f():
        (h, c), _ = cell.step(x, (h0, c0))
        return float((h * wh).sum() + (c * wc).sum())

    (h, c), cache = cell.step(x, (h0, c0))
    dx, dh, dc, g = cell.step_backward(wh, wc, cache)
    out = []
    for name in ("lstm.w", "lstm.b"):
        arr = cell.params.params[name]
        out.append(fd_check(f"convlstm {name}", f, arr, g[name], _sample_entries(rng, arr.shape, 30)))
    out.append(fd_check("convlstm input", f, x, dx, _sample_entries(rng, x.shape, 30)))
    out.append(fd_check("convlstm hidden", f, h0, dh, _sample_entries(rng, h0.shape, 30)))
    out.append(fd_check("convlstm cell", f, c0, dc, _sample_entries(rng, c0.shape, 30)))
    return out


def run_suite(seed: int = 0, per_tensor: int = 6) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for fn in (check_conv2d, check_fc, check_activations, check_losses, check_rl_losses, check_task_bias,
               check_penalty_value, check_convlstm):
        results += fn(rng)
    results += check_networks(rng, per_tensor)
    return results


def main(seed: int = 0, per_tensor: int = 6) -> int:
    t0 = time.time()
    results = run_suite(seed, per_tensor)
    for r in results:
        print(r.line())
    bad = [r for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed in {time.time() - t0:.1f}s")
    return 1 if bad else 0
