"""Edge-featured message passing network over a k-NN graph built in a learned feature space.

All functions take batched node arrays of shape (B, N, width); a batch is a
stack of independent clouds with one graph each. Neighbor arrays have shape
(B, N, k) and edge arrays (B, N, k, width), indexed by (target v, rank).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import MlpParams, MlpTape, mlp_backward, mlp_forward, softmax_cross_entropy
from .spatial import knn_indices
from .stress import combined_loss, stress_squared_grad

LEARNED, BASELINE = "learned", "baseline"


@dataclass
class Architecture:
    d_in: int = 3
    d_graph: int = 3
    d_classes: int = 40
    T: int = 4
    k: int = 16
    mode: str = LEARNED
    f_hidden: int = 16
    node_hidden: int = 64
    node_out: int = 64
    edge_hidden: int = 64
    edge_out: int = 64
    fusion_hidden: int = 256
    fusion_out: int = 256
    head_hidden: int = 128

    def __post_init__(self):
        if self.mode not in (LEARNED, BASELINE):
            raise ValueError(f"mode must be '{LEARNED}' or '{BASELINE}', got {self.mode!r}")
        if self.mode == BASELINE and self.d_graph != 3:
            raise ValueError("baseline mode performs k-NN over xyz, so d_graph must be 3")
        for name, value in asdict(self).items():
            if name != "mode" and value < (0 if name.endswith("hidden") else 1):
                raise ValueError(f"{name} must be positive, got {value}")
        if self.d_in < 3:
            raise ValueError("d_in must include the xyz columns")


def _dims(d_in: int, hidden: int, d_out: int) -> list[int]:
    return [d_in, hidden, d_out] if hidden else [d_in, d_out]


@dataclass
class ModelParams:
    arch: Architecture
    F: MlpParams
    H: list[MlpParams]
    E: list[MlpParams]
    G: MlpParams
    P: MlpParams
    skip: MlpParams | None = None  # linear projection for the fusion skip when widths differ

    def __post_init__(self):
        a = self.arch
        if len(self.H) != a.T or len(self.E) != a.T:
            raise ValueError(f"expected {a.T} node and edge MLPs, got {len(self.H)} and {len(self.E)}")
        if self.F.d_in != a.d_in or self.F.d_out != a.d_graph:
            raise ValueError(f"F must map {a.d_in} -> {a.d_graph}, got {self.F.d_in} -> {self.F.d_out}")
        node_w, edge_w = a.d_in, 2 * a.d_graph
        hist = 0
        for t in range(a.T):
            if self.E[t].d_in != edge_w + 2 * node_w:
                raise ValueError(f"E[{t}] input must be {edge_w + 2 * node_w}, got {self.E[t].d_in}")
            edge_w = self.E[t].d_out
            if self.H[t].d_in != node_w + edge_w:
                raise ValueError(f"H[{t}] input must be {node_w + edge_w}, got {self.H[t].d_in}")
            node_w = self.H[t].d_out
            hist += node_w
        if self.G.d_in != hist:
            raise ValueError(f"G input must be {hist}, got {self.G.d_in}")
        if self.G.d_out != hist:
            if self.skip is None or self.skip.dims != [hist, self.G.d_out]:
                raise ValueError("fusion skip projection must map history width to G output")
        elif self.skip is not None:
            raise ValueError("identity skip expected when G preserves width")
        if self.P.d_in != self.G.d_out or self.P.d_out != a.d_classes:
            raise ValueError(f"P must map {self.G.d_out} -> {a.d_classes}")

    @classmethod
    def init(cls, arch: Architecture, rng: np.random.Generator, dtype=np.float64) -> "ModelParams":
        # F feeds no message sums, so its output layer keeps He scaling
        F = MlpParams.init(_dims(arch.d_in, arch.f_hidden, arch.d_graph), rng, dtype, he_output=True)
        H, E = [], []
        node_w, edge_w = arch.d_in, 2 * arch.d_graph
        for _ in range(arch.T):
            E.append(MlpParams.init(_dims(edge_w + 2 * node_w, arch.edge_hidden, arch.edge_out), rng, dtype))
            edge_w = arch.edge_out
            H.append(MlpParams.init(_dims(node_w + edge_w, arch.node_hidden, arch.node_out), rng, dtype))
            node_w = arch.node_out
        hist = arch.T * arch.node_out
        G = MlpParams.init(_dims(hist, arch.fusion_hidden, arch.fusion_out), rng, dtype)
        skip = None
        if arch.fusion_out != hist:
            skip = MlpParams.init([hist, arch.fusion_out], rng, dtype)
        P = MlpParams.init(_dims(arch.fusion_out, arch.head_hidden, arch.d_classes), rng, dtype)
        return cls(arch, F, H, E, G, P, skip)

    def mlps(self) -> list[MlpParams]:
        out = [self.F, *self.H, *self.E, self.G, self.P]
        if self.skip is not None:
            out.append(self.skip)
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for m in self.mlps() for a in m.arrays()]

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.arch, self.F.zeros_like(), [h.zeros_like() for h in self.H],
                           [e.zeros_like() for e in self.E], self.G.zeros_like(), self.P.zeros_like(),
                           None if self.skip is None else self.skip.zeros_like())

    def copy(self) -> "ModelParams":
        z = self.zeros_like()
        for dst, src in zip(z.arrays(), self.arrays()):
            dst[...] = src
        return z

    @property
    def dtype(self):
        return self.F.weights[0].dtype


# --- pipeline stages -----------------------------------------------------

def gather(h: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    """h: (B, N, w), nbr: (B, N, k) -> (B, N, k, w) with row [b, v, r] = h[b, nbr[b, v, r]]."""
    b = np.arange(h.shape[0])[:, None, None]
    return h[b, nbr]


def scatter_add(grad: np.ndarray, nbr: np.ndarray, n_nodes: int) -> np.ndarray:
    """Adjoint of :func:`gather`: accumulate (B, N, k, w) rows back onto (B, N, w)."""
    bsz, _, _, w = grad.shape
    flat = (nbr + n_nodes * np.arange(bsz)[:, None, None]).ravel()
    out = np.zeros((bsz * n_nodes, w), dtype=grad.dtype)
    np.add.at(out, flat, grad.reshape(-1, w))
    return out.reshape(bsz, n_nodes, w)


def map_features(model: ModelParams, h0: np.ndarray):
    """Coordinates used for graph building: F(h0) in learned mode, the xyz columns in baseline mode."""
    if h0.shape[-1] != model.arch.d_in:
        raise ValueError(f"input width {h0.shape[-1]} != d_in {model.arch.d_in}")
    if model.arch.mode == BASELINE:
        return np.array(h0[..., :3], copy=True), None
    return mlp_forward(model.F, h0)


def build_graph(mapped: np.ndarray, k: int) -> np.ndarray:
    n = mapped.shape[-2]
    if n <= k:
        raise ValueError(f"need more than k={k} points per cloud, got {n}")
    return knn_indices(mapped, k)


def initial_edge_features(mapped: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    """Edge (w -> v) gets concat(f(v), f(w) - f(v))."""
    if mapped.shape[:2] != nbr.shape[:2]:
        raise ValueError("graph and mapped features cover different node sets")
    fv = np.broadcast_to(mapped[:, :, None, :], (*nbr.shape, mapped.shape[-1]))
    fw = gather(mapped, nbr)
    return np.concatenate([fv, fw - fv], axis=-1)


def message(e: np.ndarray) -> np.ndarray:
    """Sum of incoming edge features per node: (B, N, k, w) -> (B, N, w)."""
    if e.ndim != 4:
        raise ValueError("edge features must be (B, N, k, w)")
    return e.sum(axis=2)


def node_update(H: MlpParams, h_prev: np.ndarray, m: np.ndarray):
    return mlp_forward(H, np.concatenate([h_prev, m], axis=-1))


def edge_update(E: MlpParams, e_prev: np.ndarray, h_prev: np.ndarray, nbr: np.ndarray):
    """Edge (w -> v) gets E(concat(e_wv, h_w, h_v))."""
    hw = gather(h_prev, nbr)
    hv = np.broadcast_to(h_prev[:, :, None, :], hw.shape)
    return mlp_forward(E, np.concatenate([e_prev, hw, hv], axis=-1))


def readout(model: ModelParams, history: list[np.ndarray]):
    """Fusion with skip connection, then coordinatewise max over nodes."""
    if not history or history[0].shape[1] == 0:
        raise ValueError("readout needs at least one block and one node")
    cat = np.concatenate(history, axis=-1)
    fused, g_tape = mlp_forward(model.G, cat)
    s_tape = None
    if model.skip is not None:
        proj, s_tape = mlp_forward(model.skip, cat)
        fused = fused + proj
    else:
        fused = fused + cat
    arg = fused.argmax(axis=1)  # (B, width)
    g = np.take_along_axis(fused, arg[:, None, :], axis=1)[:, 0]
    return g, (g_tape, s_tape, arg, fused.shape)


@dataclass
class ForwardCache:
    h0: np.ndarray
    mapped: np.ndarray
    f_tape: MlpTape | None
    nbr: np.ndarray
    h: list[np.ndarray]
    e_tapes: list[MlpTape] = field(default_factory=list)
    h_tapes: list[MlpTape] = field(default_factory=list)
    readout: tuple = ()
    p_tape: MlpTape | None = None
    params_id: int = 0


def forward(model: ModelParams, h0: np.ndarray, nbr: np.ndarray | None = None):
    """Logits (B, d_classes) for a batch of clouds h0 (B, N, d_in).

    The graph is built once from the mapped coordinates and reused by every
    block. Passing ``nbr`` fixes the graph instead.
    """
    h0 = np.asarray(h0, dtype=model.dtype)
    squeeze = h0.ndim == 2
    if squeeze:
        h0 = h0[None]
        if nbr is not None and nbr.ndim == 2:
            nbr = nbr[None]
    mapped, f_tape = map_features(model, h0)
    if nbr is None:
        nbr = build_graph(mapped, model.arch.k)
    cache = ForwardCache(h0, mapped, f_tape, nbr, [h0], params_id=id(model))
    e = initial_edge_features(mapped, nbr)
    h = h0
    for t in range(model.arch.T):
        e, te = edge_update(model.E[t], e, h, nbr)
        h, th = node_update(model.H[t], h, message(e))
        cache.e_tapes.append(te)
        cache.h_tapes.append(th)
        cache.h.append(h)
    g, cache.readout = readout(model, cache.h[1:])
    logits, cache.p_tape = mlp_forward(model.P, g)
    return (logits[0] if squeeze else logits), cache


def backward(model: ModelParams, cache: ForwardCache, dlogits: np.ndarray,
             gamma: float = 0.0, dmapped_stress: np.ndarray | None = None) -> ModelParams:
    """Gradients for every parameter. Neighbor selection is treated as constant.

    ``dmapped_stress`` is the gradient of the (already batch-averaged)
    squared stress w.r.t. the mapped coordinates; it is scaled by ``gamma``.
    """
    if cache.params_id != id(model):
        raise ValueError("cache was produced by a different model")
    dlogits = np.asarray(dlogits).reshape(-1, model.arch.d_classes)
    grads = model.zeros_like()
    n_nodes = cache.h0.shape[1]

    dg, grads.P = mlp_backward(model.P, cache.p_tape, dlogits)
    g_tape, s_tape, arg, fshape = cache.readout
    dfused = np.zeros(fshape, dtype=dg.dtype)
    np.put_along_axis(dfused, arg[:, None, :], dg[:, None, :], axis=1)
    dcat, grads.G = mlp_backward(model.G, g_tape, dfused)
    if model.skip is not None:
        dproj, grads.skip = mlp_backward(model.skip, s_tape, dfused)
        dcat = dcat + dproj
    else:
        dcat = dcat + dfused
    widths = [h.shape[-1] for h in cache.h[1:]]
    dh_hist = np.split(dcat, np.cumsum(widths)[:-1], axis=-1)

    nbr = cache.nbr
    dh = dh_hist[-1]
    de = None
    for t in range(model.arch.T - 1, -1, -1):
        w_prev = cache.h[t].shape[-1]
        dhm, grads.H[t] = mlp_backward(model.H[t], cache.h_tapes[t], dh)
        dh_prev = dhm[..., :w_prev]
        dm = dhm[..., w_prev:]
        de_t = np.broadcast_to(dm[:, :, None, :], (*nbr.shape, dm.shape[-1]))
        if de is not None:
            de_t = de_t + de
        din, grads.E[t] = mlp_backward(model.E[t], cache.e_tapes[t], np.ascontiguousarray(de_t))
        we = din.shape[-1] - 2 * w_prev
        de = din[..., :we]
        dh_prev = dh_prev + scatter_add(din[..., we:we + w_prev], nbr, n_nodes)
        dh_prev = dh_prev + din[..., we + w_prev:].sum(axis=2)
        if t > 0:
            dh = dh_prev + dh_hist[t - 1]

    if model.arch.mode == BASELINE:
        return grads
    dg_ = model.arch.d_graph
    dmapped = de[..., :dg_].sum(axis=2) - de[..., dg_:].sum(axis=2)
    dmapped = dmapped + scatter_add(np.ascontiguousarray(de[..., dg_:]), nbr, n_nodes)
    if gamma and dmapped_stress is not None:
        dmapped = dmapped + gamma * dmapped_stress
    _, grads.F = mlp_backward(model.F, cache.f_tape, dmapped.astype(model.dtype), need_dx=False)
    return grads


@dataclass
class LossParts:
    loss: float
    task: float
    s_squared: np.ndarray  # per cloud
    logits: np.ndarray
    nbr: np.ndarray


def loss_and_grads(model: ModelParams, h0: np.ndarray, labels: np.ndarray, gamma: float = 0.0,
                   nbr: np.ndarray | None = None, need_grads: bool = True):
    """Cross-entropy plus ``gamma`` times mean squared stress, and its gradient bundle."""
    logits, cache = forward(model, h0, nbr)
    logits = np.atleast_2d(logits)
    task, dlogits = softmax_cross_entropy(logits, labels)
    xyz = cache.h0[..., :3]
    if model.arch.mode == BASELINE:
        s2 = np.zeros(len(xyz))
        ds = None
    else:
        s2, ds = stress_squared_grad(xyz, cache.mapped)
        ds = ds / len(xyz)
    loss = combined_loss(task, s2, gamma)
    parts = LossParts(loss, task, s2, logits, cache.nbr)
    if not need_grads:
        return parts, None
    return parts, backward(model, cache, dlogits, gamma, ds)
