"""Task-conditioned policy, critic and discriminator networks.

All three consume a batch of belief states (N x C x 20 x 32) and an integer
task id per sample. Task conditioning is an additive per-channel bias on the
output of every convolution, which equals concatenating spatially repeated
one-hot task maps to that convolution's input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .beliefs import GRID_H, GRID_W, N_TASKS

N_ACTIONS = GRID_H * GRID_W


@dataclass(frozen=True)
class ConvLayer:
    kernel: int
    padding: int
    channels: int
    pool: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    kind: str  # policy | critic | discriminator
    in_channels: int
    convs: tuple
    fcs: tuple = ()
    head: str = "softmax"  # softmax | scalar | sigmoid
    n_tasks: int = N_TASKS
    grid: tuple = (GRID_H, GRID_W)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["convs"] = [list(asdict(c).values()) for c in self.convs]
        d["fcs"] = list(self.fcs)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            kind=d["kind"],
            in_channels=d["in_channels"],
            convs=tuple(ConvLayer(*c) for c in d["convs"]),
            fcs=tuple(d["fcs"]),
            head=d["head"],
            n_tasks=d["n_tasks"],
            grid=tuple(d["grid"]),
        )

    def flatten_size(self) -> int:
        h, w = self.grid
        for c in self.convs:
            h, w = h + 2 * c.padding - c.kernel + 1, w + 2 * c.padding - c.kernel + 1
            if c.pool:
                h, w = h // 2, w // 2
        return self.convs[-1].channels * h * w


def policy_spec(in_channels: int, widths=(128, 64, 32)) -> NetworkSpec:
    w1, w2, w3 = widths
    convs = (ConvLayer(5, 2, w1), ConvLayer(3, 1, w2), ConvLayer(3, 1, w3), ConvLayer(1, 0, 1))
    return NetworkSpec("policy", in_channels, convs, head="softmax")


def discriminator_spec(in_channels: int, widths=(128, 64, 32)) -> NetworkSpec:
    spec = policy_spec(in_channels, widths)
    return NetworkSpec("discriminator", in_channels, spec.convs, head="sigmoid")


def critic_spec(in_channels: int, widths=(128, 256), hidden: int = 64) -> NetworkSpec:
    convs = (ConvLayer(3, 1, widths[0], pool=True), ConvLayer(3, 1, widths[1], pool=True))
    return NetworkSpec("critic", in_channels, convs, fcs=(hidden, 1), head="scalar")


@dataclass(frozen=True)
class ArchConfig:
    """Layer widths for the three networks; defaults are the published sizes."""

    policy_widths: tuple = (128, 64, 32)
    critic_widths: tuple = (128, 256)
    critic_hidden: int = 64
    compute_dtype: str = "float64"

    def specs(self, in_channels: int) -> dict:
        return {
            "policy": policy_spec(in_channels, self.policy_widths),
            "critic": critic_spec(in_channels, self.critic_widths, self.critic_hidden),
            "discriminator": discriminator_spec(in_channels, self.policy_widths),
        }


class ConvNet:
    """A stack of task-conditioned convolutions with an optional dense tail."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator | None = None, params: nc.ParamSet | None = None,
                 dtype=np.float64):
        self.spec = spec
        # compute precision; parameters and optimiser state stay float64
        self.dtype = np.dtype(dtype)
        if params is None:
            params = self._init_params(spec, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    @staticmethod
    def _init_params(spec: NetworkSpec, rng) -> nc.ParamSet:
        ps = nc.ParamSet()
        cin = spec.in_channels
        for i, layer in enumerate(spec.convs):
            k, cout = layer.kernel, layer.channels
            ps.add(f"conv{i}.w", nc.glorot_uniform(rng, (cout, cin, k, k), cin * k * k, cout * k * k))
            ps.add(f"conv{i}.b", np.zeros(cout))
            ps.add(f"conv{i}.task", np.zeros((spec.n_tasks, cout)))
            cin = cout
        din = spec.flatten_size()
        for j, dout in enumerate(spec.fcs):
            ps.add(f"fc{j}.w", nc.glorot_uniform(rng, (dout, din), din, dout))
            ps.add(f"fc{j}.b", np.zeros(dout))
            din = dout
        return ps

    # ------------------------------------------------------------------
    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise nc.ShapeError(
                f"{self.spec.kind} expects N x {self.spec.in_channels} x H x W input, got {x.shape}"
            )

    def _compute_params(self) -> dict:
        if self.dtype == np.float64:
            return self.params.params
        return {k: v.astype(self.dtype) for k, v in self.params.params.items()}

    def forward(self, x: np.ndarray, tasks, gates=None) -> tuple[np.ndarray, list]:
        """Raw head output: logits N x A for spatial heads, values N for the critic.

        ``gates`` (from :func:`gate_pattern` of an earlier cache) pins every
        ReLU mask and pooling choice, making the net exactly linear in each
        layer's input; gradient checks use it to stay on one linear piece.
        """
        self._check(x)
        gi = iter(gates) if gates is not None else None
        tasks = np.broadcast_to(np.asarray(tasks, dtype=int), (x.shape[0],))
        p = self._compute_params()
        a = np.asarray(x, dtype=self.dtype).transpose(0, 2, 3, 1)  # channels-last internally
        caches = []
        n_conv = len(self.spec.convs)
        spatial_out = not self.spec.fcs
        for i, layer in enumerate(self.spec.convs):
            z, cc = nc.conv_nhwc_forward(a, p[f"conv{i}.w"], p[f"conv{i}.b"], layer.padding)
            z += p[f"conv{i}.task"][tasks][:, None, None, :]
            last = spatial_out and i == n_conv - 1
            if last:
                a, mask = z, None
            elif gi is not None:
                mask = next(gi)
                a = z * mask
            else:
                a, mask = nc.relu_forward(z)
            pc = None
            if layer.pool:
                if gi is not None:
                    idx, shape = next(gi)
                    a, pc = nc.maxpool2_nhwc_select(a, idx), (idx, shape)
                else:
                    a, pc = nc.maxpool2_nhwc_forward(a)
            caches.append(("conv", cc, mask, pc, z))
        if spatial_out:
            out = a.reshape(a.shape[0], -1)
        else:
            # flatten in C x H x W order so fc weights read like the usual layout
            h = a.transpose(0, 3, 1, 2).reshape(a.shape[0], -1)
            caches.append(("flatten", a.shape))
            for j in range(len(self.spec.fcs)):
                h, fcache = nc.fc_forward(h, p[f"fc{j}.w"], p[f"fc{j}.b"])
                mask = None
                if j < len(self.spec.fcs) - 1:
                    if gi is not None:
                        mask = next(gi)
                        h = h * mask
                    else:
                        h, mask = nc.relu_forward(h)
                caches.append(("fc", fcache, mask))
            out = h[:, 0]
        return out.astype(np.float64), [tasks, caches]

    def backward(self, dout: np.ndarray, cache, need_dx: bool = False):
        """Parameter gradients (dict) and optionally the input gradient."""
        tasks, caches = cache
        grads = {}
        spatial_out = not self.spec.fcs
        h, w = self.spec.grid
        items = list(caches)
        dout = np.asarray(dout, dtype=self.dtype)
        if spatial_out:
            d = dout.reshape(dout.shape[0], h, w, 1)
        else:
            d = dout[:, None]
            j = len(self.spec.fcs) - 1
            while items[-1][0] == "fc":
                _, fcache, mask = items.pop()
                if mask is not None:
                    d = nc.relu_backward(d, mask)
                d, grads[f"fc{j}.w"], grads[f"fc{j}.b"] = nc.fc_backward(d, fcache)
                j -= 1
            _, shape = items.pop()
            n_, h_, w_, c_ = shape
            d = d.reshape(n_, c_, h_, w_).transpose(0, 2, 3, 1)
        for i in range(len(items) - 1, -1, -1):
            _, cc, mask, pc, _ = items[i]
            if pc is not None:
                d = nc.maxpool2_nhwc_backward(d, pc)
            if mask is not None:
                d = nc.relu_backward(d, mask)
            dt = np.zeros(self.params[f"conv{i}.task"].shape)
            np.add.at(dt, tasks, d.sum(axis=(1, 2)))
            grads[f"conv{i}.task"] = dt
            d, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = nc.conv_nhwc_backward(d, cc, need_dx=need_dx or i > 0)
        if need_dx:
            return grads, np.ascontiguousarray(d.transpose(0, 3, 1, 2))
        return grads, None

    @staticmethod
    def gate_pattern(cache) -> list:
        """ReLU masks and pooling choices recorded in a forward cache."""
        out = []
        for c in cache[1]:
            if c[0] == "conv":
                if c[2] is not None:
                    out.append(c[2])
                if c[3] is not None:
                    out.append(c[3])
            elif c[0] == "fc" and c[2] is not None:
                out.append(c[2])
        return out

    def n_params(self) -> int:
        return self.params.n_params()


class PolicyNet(ConvNet):
    def probs(self, x, tasks) -> np.ndarray:
        logits, _ = self.forward(x, tasks)
        return np.exp(nc.log_softmax(logits))


class CriticNet(ConvNet):
    def value(self, x, tasks) -> np.ndarray:
        return self.forward(x, tasks)[0]


class DiscriminatorNet(ConvNet):
    def prob_map(self, x, tasks) -> np.ndarray:
        logits, _ = self.forward(x, tasks)
        return nc.sigmoid(logits)

    def prob(self, x, tasks, actions) -> np.ndarray:
        logits, _ = self.forward(x, tasks)
        return nc.sigmoid(logits[np.arange(len(logits)), actions])

    def input_grad_penalty(self, x, tasks, actions, weights=None, cache=None, gates=None):
        """Squared input-gradient norm of D(S, a) per sample, with parameter gradients.

        Returns ``(penalty, grads)`` where ``penalty[n] = ||dD(x_n, a_n)/dx_n||^2``
        and ``grads`` are gradients of ``sum_n weights[n] * penalty[n]``. The
        network is piecewise linear below the sigmoid, so the input gradient
        is a chain of transposed convolutions gated by fixed ReLU masks; its
        parameter derivative is obtained by propagating the adjoint of that
        chain forward again.
        """
        n = x.shape[0]
        actions = np.asarray(actions, dtype=int)
        if weights is None:
            weights = np.ones(n)
        if cache is None:
            logits, cache = self.forward(x, tasks, gates)
        else:
            logits = None
        tasks_b, caches = cache
        p = self._compute_params()
        convs = self.spec.convs
        L = len(convs)
        hh, ww = self.spec.grid
        if logits is None:
            logits = caches[-1][4].reshape(n, -1)
        za = logits[np.arange(n), actions]
        dval = nc.sigmoid(za)
        s = dval * (1.0 - dval)

        # backward chain: deltas[l] = d z_last[a] / d z_l ; u = d z_last[a] / d x
        onehot = np.zeros((n, hh, ww, 1), dtype=self.dtype)
        onehot.reshape(n, -1)[np.arange(n), actions] = 1.0
        deltas = [None] * L
        deltas[L - 1] = onehot
        for i in range(L - 1, 0, -1):
            g = nc.conv_nhwc_input_grad(deltas[i], p[f"conv{i}.w"], convs[i].padding)
            deltas[i - 1] = g * caches[i - 1][2]
        u = nc.conv_nhwc_input_grad(deltas[0], p["conv0.w"], convs[0].padding)
        unorm2 = (u * u).sum(axis=(1, 2, 3), dtype=np.float64)
        penalty = s * s * unorm2

        # path through s (sigmoid slope at the read-out logit)
        coef = weights * 2.0 * s * unorm2 * s * (1.0 - 2.0 * dval)
        dlogits = np.zeros_like(logits)
        dlogits[np.arange(n), actions] = coef
        grads, _ = self.backward(dlogits, cache)

        # path through the weights inside the backward chain
        adj = ((2.0 * weights * s * s)[:, None, None, None] * u).astype(self.dtype)
        for i in range(L):
            k, pad = convs[i].kernel, convs[i].padding
            col, _, _ = nc.im2col_nhwc(adj, k, pad)
            grads[f"conv{i}.w"] = grads[f"conv{i}.w"] + nc.conv_nhwc_weight_grad(col, deltas[i], adj.shape[-1], k)
            if i < L - 1:
                adj, _ = nc.conv_nhwc_forward(adj, p[f"conv{i}.w"], None, pad)
                adj = adj * caches[i][2]
        return penalty, grads


def build_nets(in_channels: int, rng: np.random.Generator, arch: ArchConfig | None = None) -> dict:
    arch = arch or ArchConfig()
    specs = arch.specs(in_channels)
    dt = arch.compute_dtype
    return {
        "policy": PolicyNet(specs["policy"], rng, dtype=dt),
        "critic": CriticNet(specs["critic"], rng, dtype=dt),
        "discriminator": DiscriminatorNet(specs["discriminator"], rng, dtype=dt),
    }


def net_from_checkpoint(path, dtype=None):
    tensors, meta = nc.load_params(path)
    if "spec" not in meta:
        raise ValueError(f"{path}: not a network checkpoint")
    spec = NetworkSpec.from_dict(meta["spec"])
    cls = {"policy": PolicyNet, "critic": CriticNet, "discriminator": DiscriminatorNet}[spec.kind]
    net = cls(spec, np.random.default_rng(0), dtype=dtype or meta.get("compute_dtype", "float64"))
    for name, arr in tensors.items():
        if name not in net.params.params:
            raise ValueError(f"{path}: unexpected tensor {name!r}")
        if net.params[name].shape != arr.shape:
            raise nc.ShapeError(f"{path}: tensor {name} has shape {arr.shape}, spec wants {net.params[name].shape}")
        net.params.params[name][...] = arr
    return net


def save_net(net: ConvNet, path, extra: dict | None = None):
    meta = {"spec": net.spec.to_dict(), "compute_dtype": net.dtype.name}
    if extra:
        meta.update(extra)
    nc.save_params(path, net.params.params, meta)
