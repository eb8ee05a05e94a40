"""The network: stacked graph attention blocks over padded neighborhoods with
per-block node/edge readouts and a direct energy/force output block.

Shapes are fixed by (num systems S, padded atoms A, max neighbors M): inside
the forward pass everything is flattened to T = S*A node rows so each linear
layer is one large 2-D matmul. Multi-head self-attention runs within every
neighborhood with M as the sequence length; padded slots are masked so their
contents never reach a valid output (bit-exact mask neutrality).

Forces are direct model outputs, not an energy gradient: atomic positions
enter only through precomputed constant attributes, so no gradient path with
respect to positions exists anywhere on the tape.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import featurization as feat
from . import nn
from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .featurization import Attributes, RbfConfig
from .geometry import AtomicSystem, NeighborGraph, build_neighbor_graph
from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameter record; parameter count is a pure function of this."""

    num_blocks: int = 2
    num_heads: int = 4
    message_size: int = 64
    node_width: int = 128
    edge_width: int = 32
    readout_width: int = 64
    max_neighbors: int = 8
    cutoff: float = 3.0
    l_max: int = 6
    energy_head_width: int = 64
    force_head_width: int = 64
    num_rbf: int = 64
    rbf_width: float | None = None
    species_embed_width: int = 64
    boo_embed_width: int = 64
    ffn_hidden: int | None = None
    max_species: int = 100
    direction_eps: float = 1e-8

    def __post_init__(self):
        widths = (self.num_blocks, self.num_heads, self.message_size, self.node_width,
                  self.edge_width, self.readout_width, self.max_neighbors,
                  self.energy_head_width, self.force_head_width, self.num_rbf,
                  self.species_embed_width, self.boo_embed_width)
        if any(w < 1 for w in widths):
            raise ConfigError("all widths/counts must be >= 1")
        if self.message_size % self.num_heads != 0:
            raise ConfigError(
                f"message_size {self.message_size} not divisible by num_heads {self.num_heads}")
        if self.cutoff <= 0:
            raise ConfigError("cutoff must be positive")
        if self.l_max < 0:
            raise ConfigError("l_max must be >= 0")

    @property
    def hidden(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else self.node_width

    @property
    def rbf_config(self) -> RbfConfig:
        return RbfConfig(num_basis=self.num_rbf, cutoff=self.cutoff, width=self.rbf_width)


def tiny_config(**overrides) -> ModelConfig:
    """~0.5M parameter preset."""
    base = dict(num_blocks=2, num_heads=4, message_size=64, node_width=224,
                edge_width=32, readout_width=64, ffn_hidden=224,
                species_embed_width=64, boo_embed_width=64, num_rbf=64,
                energy_head_width=64, force_head_width=64)
    base.update(overrides)
    return ModelConfig(**base)


def small_toy_config(**overrides) -> ModelConfig:
    """~5M parameter preset; attention allocation grows faster than channels."""
    base = dict(num_blocks=3, num_heads=8, message_size=288, node_width=512,
                edge_width=64, readout_width=128, ffn_hidden=576,
                species_embed_width=128, boo_embed_width=64, num_rbf=128,
                energy_head_width=128, force_head_width=128)
    base.update(overrides)
    return ModelConfig(**base)


def medium_toy_config(**overrides) -> ModelConfig:
    """~15M parameter preset."""
    base = dict(num_blocks=4, num_heads=16, message_size=512, node_width=704,
                edge_width=96, readout_width=192, ffn_hidden=704,
                species_embed_width=128, boo_embed_width=64, num_rbf=128,
                energy_head_width=192, force_head_width=192)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# Parameter tree.

def parameter_shapes(config: ModelConfig) -> dict:
    """Name -> shape for every trainable tensor, in fixed creation order."""
    shapes: dict = {}

    def lin(name, din, dout):
        shapes[f"{name}.w"] = (din, dout)
        shapes[f"{name}.b"] = (dout,)

    def ffn2(name, din, dh, dout):
        lin(f"{name}.fc0", din, dh)
        lin(f"{name}.fc1", dh, dout)

    def ln(name, d):
        shapes[f"{name}.g"] = (d,)
        shapes[f"{name}.b"] = (d,)

    c = config
    shapes["input.species_embed"] = (c.max_species + 1, c.species_embed_width)
    ffn2("input.boo_ffn", c.l_max + 1, c.boo_embed_width, c.boo_embed_width)
    ffn2("input.node_ffn", c.species_embed_width + c.boo_embed_width,
         c.node_width, c.node_width)
    ffn2("input.edge_ffn", c.num_rbf, c.edge_width, c.edge_width)
    for b in range(c.num_blocks):
        p = f"block{b}"
        # source/destination/edge projections summed into the message tensor
        # (row blocks of one linear map over the concatenated features)
        shapes[f"{p}.msg_src.w"] = (c.node_width, c.message_size)
        shapes[f"{p}.msg_dst.w"] = (c.node_width, c.message_size)
        shapes[f"{p}.msg_edge.w"] = (c.edge_width, c.message_size)
        shapes[f"{p}.msg.b"] = (c.message_size,)
        ln(f"{p}.attn.ln", c.message_size)
        for name in ("q", "k", "v", "o"):
            lin(f"{p}.attn.{name}", c.message_size, c.message_size)
        ln(f"{p}.node_ffn.ln", c.node_width + c.message_size)
        ffn2(f"{p}.node_ffn", c.node_width + c.message_size, c.hidden, c.node_width)
        ffn2(f"{p}.edge_readout", c.message_size, c.readout_width, c.readout_width)
        ffn2(f"{p}.node_readout", c.node_width, c.readout_width, c.readout_width)
    ro = c.num_blocks * c.readout_width
    ffn2("output.energy", ro, c.energy_head_width, 1)
    ffn2("output.magnitude", ro, c.force_head_width, 1)
    ffn2("output.direction", ro, c.force_head_width, 3)
    return shapes


_COMPONENTS = ("input", "attention", "ffn", "readout", "heads")


def _component_of(name: str) -> str:
    if name.startswith("input."):
        return "input"
    if ".msg" in name or ".attn." in name:
        return "attention"
    if "readout" in name:
        return "readout"
    if name.startswith("output."):
        return "heads"
    return "ffn"


def parameter_audit(config: ModelConfig) -> dict:
    """Exact trainable-scalar counts, total and per named component/group."""
    groups = {name: int(np.prod(shape)) for name, shape in parameter_shapes(config).items()}
    components = {comp: 0 for comp in _COMPONENTS}
    for name, size in groups.items():
        components[_component_of(name)] += size
    return {"total": sum(groups.values()), "components": components, "groups": groups}


class ModelParams:
    """All learnable weights as a flat name -> Tensor dict."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in parameter_shapes(config).items():
            tensors[name] = Tensor(nn.init_array(name, shape, rng, dtype),
                                   requires_grad=True, dtype=dtype)
        return cls(config, tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {
            name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for name, t in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def set_requires_grad(self, flag: bool):
        for t in self.tensors.values():
            t.requires_grad = flag

    def state_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_arrays(self, arrays: dict):
        for name, t in self.tensors.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != t.data.shape:
                raise ConfigError(f"checkpoint shape mismatch for {name}")
            t.data = np.ascontiguousarray(arrays[name]).astype(t.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# Batch packing.

@dataclass
class PackedBatch:
    """A stack of systems padded to (A atoms, M neighbors) for one pass."""

    species: np.ndarray        # (S, A) int, 0 where padded
    atom_mask: np.ndarray      # (S, A) bool
    gather_index: np.ndarray   # (S*A, M) global row indices, 0 where invalid
    valid_mask: np.ndarray     # (S, A, M) bool
    unit_dirs: np.ndarray      # (S, A, M, 3)
    boo: np.ndarray            # (S, A, l_max+1)
    rbf: np.ndarray            # (S, A, M, num_rbf)
    n_atoms: np.ndarray        # (S,)
    energy_labels: np.ndarray | None = None   # (S,)
    force_labels: np.ndarray | None = None    # (S, A, 3)

    @property
    def num_systems(self) -> int:
        return self.species.shape[0]

    @property
    def atoms_padded(self) -> int:
        return self.species.shape[1]


def system_attributes(system: AtomicSystem, config: ModelConfig,
                      graph: NeighborGraph | None = None) -> Attributes:
    if graph is None:
        graph = build_neighbor_graph(system, config.cutoff, config.max_neighbors)
    return feat.precompute_attributes(system, graph, config.l_max, config.rbf_config)


def pack_batch(systems, config: ModelConfig, attributes=None,
               atoms_padded: int | None = None) -> PackedBatch:
    """Pad a list of systems (and their attributes) into one rectangular batch."""
    if attributes is None:
        attributes = [system_attributes(sys_, config) for sys_ in systems]
    s = len(systems)
    a = atoms_padded or max(len(sys_) for sys_ in systems)
    m = config.max_neighbors
    species = np.zeros((s, a), dtype=np.int64)
    atom_mask = np.zeros((s, a), dtype=bool)
    gather = np.zeros((s, a, m), dtype=np.int64)
    valid = np.zeros((s, a, m), dtype=bool)
    dirs = np.zeros((s, a, m, 3), dtype=np.float64)
    boo = np.zeros((s, a, config.l_max + 1), dtype=np.float64)
    rbf = np.zeros((s, a, m, config.num_rbf), dtype=np.float64)
    n_atoms = np.zeros(s, dtype=np.int64)
    energies = np.zeros(s, dtype=np.float64)
    forces = np.zeros((s, a, 3), dtype=np.float64)
    have_e = all(sys_.energy is not None for sys_ in systems)
    have_f = all(sys_.forces is not None for sys_ in systems)
    for i, (sys_, attr) in enumerate(zip(systems, attributes)):
        n = len(sys_)
        if n > a:
            raise ShapeError(f"system with {n} atoms exceeds padded size {a}")
        if attr.valid_mask.shape[1] != m:
            raise ShapeError("attribute neighbor width disagrees with config.max_neighbors")
        n_atoms[i] = n
        species[i, :n] = attr.species
        atom_mask[i, :n] = True
        valid[i, :n] = attr.valid_mask
        # sentinel -1 clipped to 0 and offset into this system's row block;
        # the forward pass zeroes everything gathered through invalid slots
        gather[i, :n] = np.where(attr.valid_mask, attr.neighbor_index, 0) + i * a
        gather[i, n:] = i * a
        boo[i, :n] = attr.boo
        rbf[i, :n] = attr.rbf
        dirs[i, :n] = attr.unit_dirs
        if have_e:
            energies[i] = sys_.energy
        if have_f:
            forces[i, :n] = sys_.forces
    return PackedBatch(
        species=species, atom_mask=atom_mask,
        gather_index=gather.reshape(s * a, m), valid_mask=valid,
        unit_dirs=dirs, boo=boo, rbf=rbf, n_atoms=n_atoms,
        energy_labels=energies if have_e else None,
        force_labels=forces if have_f else None)


# ---------------------------------------------------------------------------
# Forward pass.

@dataclass
class Prediction:
    """System energy (eV) and per-atom forces (eV/A), direct predictions."""

    energy: float
    forces: np.ndarray
    isolated_atoms: int = 0
    degenerate_directions: int = 0


@dataclass
class BatchOutput:
    """Differentiable batch outputs plus bookkeeping flags."""

    energy: Tensor            # (S,)
    forces: Tensor            # (S, A, 3), padded rows zero
    magnitudes: Tensor        # (S, A) force-magnitude head output
    atom_mask: np.ndarray     # (S, A)
    isolated_atoms: int
    degenerate_directions: int


def graph_attention_block(node: Tensor, edge: Tensor, batch: PackedBatch,
                          params: dict, prefix: str, config: ModelConfig):
    """One attention block: messages, neighborhood self-attention, node update.

    Returns (updated node features (T, node_width), messages (T, M, H)).
    Padded slots contribute exactly zero to every aggregate.
    """
    t_rows, m = batch.gather_index.shape
    h = config.message_size
    nh = config.num_heads
    hd = h // nh
    dtype = node.dtype
    mask3 = batch.valid_mask.reshape(t_rows, m, 1).astype(dtype)
    mask3_t = Tensor(mask3)

    # project node features once per node, then gather/broadcast the narrow
    # projections; summing the three projections equals one linear layer over
    # the concatenated (source, destination, edge) features
    src_proj = T.matmul(node, params[f"{prefix}.msg_src.w"])
    dst_proj = T.matmul(node, params[f"{prefix}.msg_dst.w"])
    src = T.mul(T.gather_rows(src_proj, batch.gather_index), mask3_t)
    edge_proj = nn.linear(edge, params[f"{prefix}.msg_edge.w"], params[f"{prefix}.msg.b"])
    messages = T.add(T.add(src, T.reshape(dst_proj, (t_rows, 1, h))), edge_proj)

    # pre-norm multi-head self-attention, sequence length = M
    x = T.layer_norm(messages, params[f"{prefix}.attn.ln.g"], params[f"{prefix}.attn.ln.b"])

    def heads(name):
        y = nn.linear(x, params[f"{prefix}.attn.{name}.w"], params[f"{prefix}.attn.{name}.b"])
        return T.swapaxes(T.reshape(y, (t_rows, m, nh, hd)), 1, 2)  # (T, nh, M, hd)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.matmul(q, T.swapaxes(k, -1, -2), scale=float(1.0 / np.sqrt(hd)))
    key_mask = batch.valid_mask.reshape(t_rows, 1, 1, m)
    probs = T.masked_softmax(scores, key_mask, axis=-1)
    ctx = T.reshape(T.swapaxes(T.matmul(probs, v), 1, 2), (t_rows, m, h))
    attn_out = nn.linear(ctx, params[f"{prefix}.attn.o.w"], params[f"{prefix}.attn.o.b"])
    messages = T.mul(T.add(messages, attn_out), mask3_t)  # padded slots exactly zero

    agg = T.masked_sum(messages, mask3, axis=1)  # (T, H)
    update = nn.ffn_pre_ln(T.concat([node, agg], axis=-1), params, f"{prefix}.node_ffn")
    return T.add(node, update), messages


def readout(messages: Tensor, node: Tensor, batch: PackedBatch,
            params: dict, prefix: str):
    """Per-block readouts: edge features from unaggregated messages, node
    features from the updated node state. Masked edge slots come back zero."""
    t_rows, m = batch.gather_index.shape
    mask3 = Tensor(batch.valid_mask.reshape(t_rows, m, 1).astype(node.dtype))
    edge_ro = T.mul(nn.ffn(messages, params, f"{prefix}.edge_readout"), mask3)
    node_ro = nn.ffn(node, params, f"{prefix}.node_readout")
    return edge_ro, node_ro


def output_block(node_ro: Tensor, edge_ro: Tensor, batch: PackedBatch,
                 params: dict, config: ModelConfig) -> BatchOutput:
    """Energy, force-magnitude, and symmetry-breaking force-direction heads.

    energy: per-atom FFN summed over each system (extensive);
    magnitude: free scalar per atom;
    direction: per-edge 3-vector c modulates the unit edge direction
    elementwise, summed over the neighborhood and normalized with an
    eps floor (so an empty or cancelled sum yields a near-zero force).
    """
    s, a = batch.species.shape
    t_rows, m = batch.gather_index.shape
    dtype = node_ro.dtype
    atom_mask_col = Tensor(batch.atom_mask.reshape(t_rows, 1).astype(dtype))

    e_atom = T.mul(nn.ffn(node_ro, params, "output.energy"), atom_mask_col)
    energy = T.reduce_sum(T.reshape(e_atom, (s, a)), axis=1)

    magnitude = nn.ffn(node_ro, params, "output.magnitude")  # (T, 1)
    c = nn.ffn(edge_ro, params, "output.direction")          # (T, M, 3)
    dirs = Tensor(batch.unit_dirs.reshape(t_rows, m, 3).astype(dtype))
    raw = T.masked_sum(T.mul(c, dirs), batch.valid_mask.reshape(t_rows, m, 1), axis=1)
    norm = T.maximum(T.sqrt(T.reduce_sum(T.mul(raw, raw), axis=-1, keepdims=True)),
                     config.direction_eps)
    forces = T.mul(T.mul(magnitude, T.div(raw, norm)), atom_mask_col)

    valid_atoms = batch.atom_mask.reshape(t_rows)
    isolated = ~batch.valid_mask.reshape(t_rows, m).any(axis=1) & valid_atoms
    degenerate = (norm.data.reshape(t_rows) <= config.direction_eps) & valid_atoms & ~isolated
    return BatchOutput(
        energy=energy,
        forces=T.reshape(forces, (s, a, 3)),
        magnitudes=T.reshape(magnitude, (s, a)),
        atom_mask=batch.atom_mask,
        isolated_atoms=int(isolated.sum()),
        degenerate_directions=int(degenerate.sum()),
    )


def forward_batch(batch: PackedBatch, params: ModelParams) -> BatchOutput:
    """Input block -> B x (attention + readout) -> output block, on a batch."""
    config = params.config
    s, a = batch.species.shape
    t_rows = s * a
    attrs = Attributes(
        species=batch.species.reshape(t_rows),
        boo=batch.boo.reshape(t_rows, -1),
        rbf=batch.rbf.reshape(t_rows, config.max_neighbors, -1),
        unit_dirs=batch.unit_dirs.reshape(t_rows, config.max_neighbors, 3),
        valid_mask=batch.valid_mask.reshape(t_rows, config.max_neighbors),
        neighbor_index=None,
        isolated=~batch.valid_mask.reshape(t_rows, config.max_neighbors).any(axis=1),
    )
    # padded atom rows carry species 0 = table row 0, masked out downstream
    spec = np.where(batch.atom_mask.reshape(t_rows), attrs.species, 0)
    if spec.max(initial=0) > config.max_species:
        raise DataError(f"species {int(spec.max())} outside the embedding table")
    attrs.species = spec
    fs = feat.apply_input_block(attrs, params.tensors, config.max_species,
                                dtype=params.dtype)
    node, edge = fs.node_features, fs.edge_features
    node_ros, edge_ros = [], []
    for b in range(config.num_blocks):
        node, messages = graph_attention_block(node, edge, batch, params.tensors,
                                               f"block{b}", config)
        edge_ro, node_ro = readout(messages, node, batch, params.tensors, f"block{b}")
        node_ros.append(node_ro)
        edge_ros.append(edge_ro)
    node_cat = T.concat(node_ros, axis=-1)
    edge_cat = T.concat(edge_ros, axis=-1)
    return output_block(node_cat, edge_cat, batch, params.tensors, config)


def forward(system: AtomicSystem, params: ModelParams,
            graph: NeighborGraph | None = None) -> Prediction:
    """Single-system inference: build graph, featurize, run the network."""
    config = params.config
    attrs = system_attributes(system, config, graph)
    batch = pack_batch([system], config, attributes=[attrs])
    out = forward_batch(batch, params)
    return Prediction(
        energy=float(out.energy.data[0]),
        forces=np.asarray(out.forces.data[0], dtype=np.float64),
        isolated_atoms=out.isolated_atoms,
        degenerate_directions=out.degenerate_directions,
    )


def predict_forces(systems, params: ModelParams) -> list:
    """Forces for a list of systems in one padded batch (inference only)."""
    config = params.config
    attrs = [system_attributes(s, config) for s in systems]
    batch = pack_batch(systems, config, attributes=attrs)
    out = forward_batch(batch, params)
    f = np.asarray(out.forces.data, dtype=np.float64)
    return [f[i, :n] for i, n in enumerate(batch.n_atoms)]


# ---------------------------------------------------------------------------
# Checkpoints: versioned npz with config record + named parameter blobs.

def save_checkpoint(path, params: ModelParams, step: int = 0,
                    optimizer: dict | None = None, extra: dict | None = None):
    """Bit-exact round-trip container for params (+ optional optimizer state)."""
    payload = {f"param/{k}": t.data for k, t in params.tensors.items()}
    if optimizer:
        for group, arrays in optimizer.items():
            for k, arr in arrays.items():
                payload[f"opt/{group}/{k}"] = arr
    meta = {
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "dtype": str(params.dtype),
        "config": dataclasses.asdict(params.config),
        "extra": extra or {},
    }
    payload["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path):
    """Returns (params, step, optimizer_state, extra)."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta['version']}")
        config = ModelConfig(**meta["config"])
        dtype = np.dtype(meta["dtype"])
        tensors = {}
        optimizer: dict = {}
        for key in z.files:
            if key.startswith("param/"):
                tensors[key[len("param/"):]] = Tensor(z[key].astype(dtype, copy=False),
                                                      requires_grad=True)
            elif key.startswith("opt/"):
                _, group, name = key.split("/", 2)
                optimizer.setdefault(group, {})[name] = z[key].copy()
    expected = set(parameter_shapes(config))
    if set(tensors) != expected:
        raise ConfigError("checkpoint parameter names do not match the config")
    return ModelParams(config, tensors), meta["step"], optimizer, meta["extra"]
