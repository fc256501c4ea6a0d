"""Versioned binary containers for trained models.

Graph container (magic ``DEGM``, version 1):

    header:  magic 4s | version u32 | node_count u32
    arch:    data_dim u32 | inter_dim u32 | latent_dim u32 | feat_dim u32
             | activation u8 | likelihood u8 | normalize u8
    node*:   kind u8 (0 basic, 1 specific) | task_id u32
             | basic: best_elbo f64
             | specific: K u32 | pi f64[K]
             | sub-model count u32, then per sub-model:
                 layer_count u32, per layer: fan_in u32 | fan_out u32
                 | activation u8 | W f64[fan_in*fan_out] | b f64[fan_out]
    tail:    adjacency V, t*t f64 row-major

Single-model container (magic ``SVAE``, version 1) stores the same arch and
sub-model encoding for trunk, mu head, logvar head, decoder.

All integers and floats are little-endian; float payloads are raw f64.
"""

from __future__ import annotations

import struct

import numpy as np

from .graph import ArchSpec, BasicNode, GraphState, SpecificNode
from .nn import ACTIVATIONS, Mlp, Tensor
from .vae import LIKELIHOODS, VaeModel

GRAPH_MAGIC = b"DEGM"
MODEL_MAGIC = b"SVAE"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Container is malformed or truncated."""


def _act_byte(name: str) -> int:
    return ACTIVATIONS.index(name)


def _likelihood_byte(name: str) -> int:
    return LIKELIHOODS.index(name)


class _Writer:
    def __init__(self):
        self.chunks: list[bytes] = []

    def u8(self, v: int):
        self.chunks.append(struct.pack("<B", v))

    def u32(self, v: int):
        self.chunks.append(struct.pack("<I", v))

    def f64(self, v: float):
        self.chunks.append(struct.pack("<d", float(v)))

    def f64_array(self, arr: np.ndarray):
        self.chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def bytes(self) -> bytes:
        return b"".join(self.chunks)


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.off = 0
        self.path = path

    def _take(self, count: int) -> bytes:
        if self.off + count > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.off}")
        out = self.buf[self.off : self.off + count]
        self.off += count
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def f64_array(self, count: int) -> np.ndarray:
        raw = self._take(count * 8)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def _write_mlp(w: _Writer, mlp: Mlp) -> None:
    w.u32(len(mlp.weights))
    for weight, bias, act in zip(mlp.weights, mlp.biases, mlp.activations):
        fan_in, fan_out = weight.shape
        w.u32(fan_in)
        w.u32(fan_out)
        w.u8(_act_byte(act))
        w.f64_array(weight.data)
        w.f64_array(bias.data)


def _read_mlp(r: _Reader, requires_grad: bool = False) -> Mlp:
    n_layers = r.u32()
    weights, biases, acts = [], [], []
    for _ in range(n_layers):
        fan_in = r.u32()
        fan_out = r.u32()
        act = ACTIVATIONS[r.u8()]
        w = r.f64_array(fan_in * fan_out).reshape(fan_in, fan_out)
        b = r.f64_array(fan_out)
        weights.append(Tensor(w, requires_grad=requires_grad))
        biases.append(Tensor(b, requires_grad=requires_grad))
        acts.append(act)
    return Mlp(weights, biases, tuple(acts))


def _write_arch(w: _Writer, arch: ArchSpec) -> None:
    w.u32(arch.data_dim)
    w.u32(arch.inter_dim)
    w.u32(arch.latent_dim)
    w.u32(arch.feat_dim)
    w.u8(_act_byte(arch.hidden_activation))
    w.u8(_likelihood_byte(arch.likelihood))
    w.u8(1 if arch.normalize_recon else 0)


def _read_arch(r: _Reader) -> ArchSpec:
    return ArchSpec(
        data_dim=r.u32(),
        inter_dim=r.u32(),
        latent_dim=r.u32(),
        feat_dim=r.u32(),
        hidden_activation=ACTIVATIONS[r.u8()],
        likelihood=LIKELIHOODS[r.u8()],
        normalize_recon=bool(r.u8()),
    )


def save_graph(path, graph: GraphState) -> None:
    w = _Writer()
    w.chunks.append(GRAPH_MAGIC)
    w.u32(FORMAT_VERSION)
    nodes = graph.all_nodes()
    w.u32(len(nodes))
    _write_arch(w, graph.arch)
    for node in nodes:
        if isinstance(node, BasicNode):
            w.u8(0)
            w.u32(node.task_id)
            w.f64(node.best_elbo if node.best_elbo is not None else float("nan"))
        else:
            w.u8(1)
            w.u32(node.task_id)
            w.u32(len(node.pi))
            w.f64_array(node.pi)
        subs = node.sub_models()
        w.u32(len(subs))
        for mlp in subs:
            _write_mlp(w, mlp)
    w.f64_array(graph.adjacency)
    with open(path, "wb") as f:
        f.write(w.bytes())


def load_graph(path) -> GraphState:
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf, str(path))
    magic = r._take(4)
    if magic != GRAPH_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {GRAPH_MAGIC!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    node_count = r.u32()
    arch = _read_arch(r)
    graph = GraphState(arch=arch)
    for _ in range(node_count):
        kind = r.u8()
        task_id = r.u32()
        if kind == 0:
            best = r.f64()
            node = BasicNode.__new__(BasicNode)
            node.id = task_id
            node.task_id = task_id
            node.arch = arch
            node.best_elbo = None if np.isnan(best) else best
            node.frozen = True
            sub_count = r.u32()
            if sub_count != 5:
                raise CheckpointError(f"{path}: basic node carries {sub_count} sub-models")
            node.f_tilde = _read_mlp(r)
            node.f_mu = _read_mlp(r)
            node.f_logvar = _read_mlp(r)
            node.g_tilde = _read_mlp(r)
            node.g_prime = _read_mlp(r)
            graph.basic_nodes.append(node)
        elif kind == 1:
            k = r.u32()
            pi = r.f64_array(k)
            node = SpecificNode.__new__(SpecificNode)
            node.id = task_id
            node.task_id = task_id
            node.arch = arch
            node.pi = pi
            node.frozen = True
            sub_count = r.u32()
            if sub_count != 3:
                raise CheckpointError(f"{path}: specific node carries {sub_count} sub-models")
            node.f_mu = _read_mlp(r)
            node.f_logvar = _read_mlp(r)
            node.g_prime = _read_mlp(r)
            graph.specific_nodes.append(node)
        else:
            raise CheckpointError(f"{path}: unknown node kind {kind}")
    t = node_count
    graph.adjacency = r.f64_array(t * t).reshape(t, t)
    return graph


def save_model(path, model: VaeModel) -> None:
    w = _Writer()
    w.chunks.append(MODEL_MAGIC)
    w.u32(FORMAT_VERSION)
    w.u32(model.data_dim)
    w.u32(model.latent_dim)
    w.u8(_likelihood_byte(model.likelihood))
    w.u8(1 if model.normalize_recon else 0)
    for mlp in (model.trunk, model.mu_head, model.logvar_head, model.decoder):
        _write_mlp(w, mlp)
    with open(path, "wb") as f:
        f.write(w.bytes())


def load_model(path, requires_grad: bool = False) -> VaeModel:
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf, str(path))
    magic = r._take(4)
    if magic != MODEL_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    r.u32()  # data_dim, implied by the decoder's output layer
    latent_dim = r.u32()
    likelihood = LIKELIHOODS[r.u8()]
    normalize = bool(r.u8())
    trunk = _read_mlp(r, requires_grad)
    mu_head = _read_mlp(r, requires_grad)
    logvar_head = _read_mlp(r, requires_grad)
    decoder = _read_mlp(r, requires_grad)
    return VaeModel(
        trunk=trunk,
        mu_head=mu_head,
        logvar_head=logvar_head,
        decoder=decoder,
        latent_dim=latent_dim,
        likelihood=likelihood,
        normalize_recon=normalize,
    )


def sniff_kind(path) -> str:
    """Return 'graph' or 'model' by magic; raise CheckpointError otherwise."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == GRAPH_MAGIC:
        return "graph"
    if magic == MODEL_MAGIC:
        return "model"
    raise CheckpointError(f"{path}: bad magic {magic!r}")
