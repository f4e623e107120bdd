"""Feature enhancement by positional fusion and attention message passing.

Feature grids are treated as graphs: one node per cell. Each step first
aggregates messages along grid-neighbor edges inside each image (inner flow),
then along the full bipartite connectivity between the two images (cross
flow). Messages are attention-weighted value projections; node features are
updated residually through a two-layer MLP, so all-zero parameters make every
step an exact identity.

All arithmetic runs in float64 with max-subtracted softmax; outputs are cast
back to float32 grids.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidShape, IsolatedNode, IoError, ShapeMismatch
from .tensorio import FeatureGrid, read_tensor, write_tensor

DEFAULT_FREQUENCY_BASE = 10000.0


def positional_encode(height: int, width: int, channels: int, base: float = DEFAULT_FREQUENCY_BASE) -> np.ndarray:
    """Sinusoidal grid encoding of shape [H, W, C].

    Channels [0, C/2) encode the row coordinate and [C/2, C) the column;
    within each half, channel pair 2i holds sin(p / base^(4i/C)) and 2i+1 the
    matching cos. Requires C divisible by 4.
    """
    if channels % 4 != 0 or channels < 4:
        raise InvalidShape(f"positional encoding needs C % 4 == 0, got C={channels}")
    half = channels // 2
    pairs = channels // 4
    divisors = base ** (4.0 * np.arange(pairs) / channels)

    def axis_encoding(n: int) -> np.ndarray:
        angles = np.arange(n)[:, None] / divisors[None, :]
        enc = np.empty((n, half))
        enc[:, 0::2] = np.sin(angles)
        enc[:, 1::2] = np.cos(angles)
        return enc

    out = np.empty((height, width, channels))
    out[:, :, :half] = axis_encoding(height)[:, None, :]
    out[:, :, half:] = axis_encoding(width)[None, :, :]
    return out


@dataclass
class PositionalEncoder:
    """Sinusoidal encoder with an optional learned CxC map applied on top."""

    channels: int
    base: float = DEFAULT_FREQUENCY_BASE
    linear_map: np.ndarray | None = None

    def __post_init__(self):
        if self.linear_map is not None:
            lm = np.asarray(self.linear_map, dtype=np.float64)
            if lm.shape != (self.channels, self.channels):
                raise ShapeMismatch(
                    f"positional map must be {self.channels}x{self.channels}, got {lm.shape}"
                )
            if not np.all(np.isfinite(lm)):
                raise InvalidShape("positional map contains non-finite values")
            self.linear_map = lm

    def encode(self, height: int, width: int) -> np.ndarray:
        enc = positional_encode(height, width, self.channels, self.base)
        if self.linear_map is not None:
            enc = enc @ self.linear_map
        return enc


def fuse_position(features: FeatureGrid, encoding: np.ndarray) -> FeatureGrid:
    """Elementwise sum of appearance features and a positional encoding."""
    enc = np.asarray(encoding)
    if enc.shape != features.values.shape:
        raise ShapeMismatch(f"encoding {enc.shape} vs features {features.values.shape}")
    fused = features.values.astype(np.float64) + enc
    return FeatureGrid(fused.astype(np.float32))


@dataclass
class AttentionParams:
    """Projections and MLP weights for one message-passing block.

    Vectors are rows: projections act as x @ w, the MLP as
    relu(concat(f, m) @ mlp1_w + mlp1_b) @ mlp2_w + mlp2_b.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    mlp1_w: np.ndarray
    mlp1_b: np.ndarray
    mlp2_w: np.ndarray
    mlp2_b: np.ndarray

    def __post_init__(self):
        arrays = {name: np.asarray(getattr(self, name), dtype=np.float64) for name in
                  ("wq", "wk", "wv", "mlp1_w", "mlp1_b", "mlp2_w", "mlp2_b")}
        c = arrays["wq"].shape[0] if arrays["wq"].ndim == 2 else 0
        expected = {
            "wq": (c, c), "wk": (c, c), "wv": (c, c),
            "mlp1_w": (2 * c, c), "mlp1_b": (c,),
            "mlp2_w": (c, c), "mlp2_b": (c,),
        }
        for name, arr in arrays.items():
            if arr.shape != expected[name]:
                raise ShapeMismatch(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise InvalidShape(f"{name} contains non-finite values")
            setattr(self, name, arr)

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def zeros(cls, channels: int) -> "AttentionParams":
        c = channels
        return cls(
            wq=np.zeros((c, c)), wk=np.zeros((c, c)), wv=np.zeros((c, c)),
            mlp1_w=np.zeros((2 * c, c)), mlp1_b=np.zeros(c),
            mlp2_w=np.zeros((c, c)), mlp2_b=np.zeros(c),
        )

    @classmethod
    def random(cls, rng: np.random.Generator, channels: int) -> "AttentionParams":
        c = channels

        def xavier(fan_in: int, fan_out: int) -> np.ndarray:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        return cls(
            wq=xavier(c, c), wk=xavier(c, c), wv=xavier(c, c),
            mlp1_w=xavier(2 * c, c), mlp1_b=np.zeros(c),
            mlp2_w=xavier(c, c), mlp2_b=np.zeros(c),
        )


@dataclass
class GraphNodeState:
    """Per-node features [N, C] for an H x W grid, flattened row-major."""

    features: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] != self.height * self.width:
            raise InvalidShape(
                f"features {f.shape} do not match grid {self.height}x{self.width}"
            )
        if self.height < 1 or self.width < 1:
            raise InvalidShape("grid must be at least 1x1")
        self.features = f

    @classmethod
    def from_grid(cls, grid: FeatureGrid) -> "GraphNodeState":
        return cls(grid.nodes().astype(np.float64), grid.height, grid.width)

    def to_grid(self) -> FeatureGrid:
        shaped = self.features.reshape(self.height, self.width, -1)
        return FeatureGrid(shaped.astype(np.float32))


def grid_neighbors(height: int, width: int, connectivity: int = 8, wrap: bool = False) -> list[np.ndarray]:
    """Neighbor index lists for each grid node; 1x1 grids self-connect."""
    if connectivity == 4:
        offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    elif connectivity == 8:
        offsets = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    else:
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    if height == 1 and width == 1:
        return [np.array([0])]
    edges = []
    for r in range(height):
        for c in range(width):
            idx = []
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if wrap:
                    rr, cc = rr % height, cc % width
                elif not (0 <= rr < height and 0 <= cc < width):
                    continue
                if (rr, cc) != (r, c):
                    idx.append(rr * width + cc)
            edges.append(np.array(sorted(set(idx)), dtype=np.intp))
    return edges


def _softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def attention_aggregate(
    targets: GraphNodeState,
    sources: GraphNodeState,
    edges: list[np.ndarray] | None,
    params: AttentionParams,
    return_weights: bool = False,
):
    """Attention-weighted message for every target node.

    For target i connected to sources J: softmax over j in J of
    (f_i @ wq) . (f_j @ wk) weighting the value rows f_j @ wv. `edges` is one
    source-index array per target, or None for full bipartite connectivity.
    """
    if targets.features.shape[1] != sources.features.shape[1]:
        raise ShapeMismatch(
            f"width mismatch: targets {targets.features.shape[1]} vs "
            f"sources {sources.features.shape[1]}"
        )
    q = targets.features @ params.wq
    k = sources.features @ params.wk
    v = sources.features @ params.wv

    if edges is None:
        weights = _softmax(q @ k.T, axis=1)
        messages = weights @ v
        return (messages, weights) if return_weights else messages

    if len(edges) != targets.features.shape[0]:
        raise ShapeMismatch(f"{len(edges)} edge lists for {targets.features.shape[0]} targets")
    messages = np.zeros_like(targets.features)
    all_weights = []
    for i, idx in enumerate(edges):
        if len(idx) == 0:
            raise IsolatedNode(f"target node {i} has no connected source")
        alpha = _softmax(k[idx] @ q[i])
        messages[i] = alpha @ v[idx]
        if return_weights:
            all_weights.append(alpha)
    return (messages, all_weights) if return_weights else messages


def residual_update(state: GraphNodeState, messages: np.ndarray, params: AttentionParams) -> GraphNodeState:
    """f' = f + mlp2(relu(mlp1(concat(f, m)))); zero MLP weights give identity."""
    messages = np.asarray(messages, dtype=np.float64)
    if messages.shape != state.features.shape:
        raise ShapeMismatch(f"messages {messages.shape} vs state {state.features.shape}")
    stacked = np.concatenate([state.features, messages], axis=1)
    hidden = np.maximum(stacked @ params.mlp1_w + params.mlp1_b, 0.0)
    delta = hidden @ params.mlp2_w + params.mlp2_b
    return GraphNodeState(state.features + delta, state.height, state.width)


def inner_flow_step(
    state: GraphNodeState,
    params: AttentionParams,
    neighborhood: int = 8,
    wrap: bool = False,
) -> GraphNodeState:
    """One aggregation + residual update over grid-neighbor edges."""
    edges = grid_neighbors(state.height, state.width, neighborhood, wrap=wrap)
    messages = attention_aggregate(state, state, edges, params)
    return residual_update(state, messages, params)


def cross_flow_step(
    query: GraphNodeState,
    support: GraphNodeState,
    params: AttentionParams,
) -> tuple[GraphNodeState, GraphNodeState]:
    """Bidirectional full-bipartite aggregation; both directions share params.

    Messages for both grids are computed from the incoming states before
    either residual update, so swapping the arguments swaps the outputs.
    """
    query_messages = attention_aggregate(query, support, None, params)
    support_messages = attention_aggregate(support, query, None, params)
    return (
        residual_update(query, query_messages, params),
        residual_update(support, support_messages, params),
    )


@dataclass
class FlowSchedule:
    """How many passes to run and how parameters are reused across them."""

    mode: str = "iterative"
    steps: int = 1
    neighborhood: int = 8

    def __post_init__(self):
        if self.mode not in ("iterative", "stacked"):
            raise ConfigError(f"mode must be iterative or stacked, got {self.mode!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.neighborhood not in (4, 8):
            raise ConfigError(f"neighborhood must be 4 or 8, got {self.neighborhood}")

    @property
    def parameter_sets(self) -> int:
        return 1 if self.mode == "iterative" else self.steps


_BLOCK_TENSORS = ("wq", "wk", "wv", "mlp1_w", "mlp1_b", "mlp2_w", "mlp2_b")
POS_MAP_FILE = "pos_map.cmt"
PARAMS_CFG = "params.cfg"


@dataclass
class ParameterStore:
    """Attention parameter sets plus the optional learned positional map."""

    channels: int
    schedule: FlowSchedule
    blocks: list[AttentionParams]
    pos_map: np.ndarray | None = None

    def __post_init__(self):
        if len(self.blocks) != self.schedule.parameter_sets:
            raise ConfigError(
                f"{self.schedule.mode} schedule with T={self.schedule.steps} needs "
                f"{self.schedule.parameter_sets} parameter sets, store has {len(self.blocks)}"
            )
        for block in self.blocks:
            if block.channels != self.channels:
                raise ConfigError(
                    f"block has C={block.channels}, store declares C={self.channels}"
                )

    @classmethod
    def zeros(cls, channels: int, schedule: FlowSchedule) -> "ParameterStore":
        blocks = [AttentionParams.zeros(channels) for _ in range(schedule.parameter_sets)]
        return cls(channels, schedule, blocks, pos_map=np.zeros((channels, channels)))

    @classmethod
    def random(cls, seed: int, channels: int, schedule: FlowSchedule) -> "ParameterStore":
        rng = np.random.default_rng(seed)
        blocks = [AttentionParams.random(rng, channels) for _ in range(schedule.parameter_sets)]
        return cls(channels, schedule, blocks, pos_map=None)


def save_parameter_store(store: ParameterStore, path: str | Path) -> None:
    """Write a store directory: params.cfg, block tensors, optional pos_map.cmt.

    Iterative stores keep their single parameter set at the root; stacked
    stores use one block_<t>/ subdirectory per step.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = (
        f"c = {store.channels}\n"
        f"t = {store.schedule.steps}\n"
        f"mode = {store.schedule.mode}\n"
        f"neighborhood = {store.schedule.neighborhood}\n"
    )
    (path / PARAMS_CFG).write_text(cfg)
    if store.pos_map is not None:
        write_tensor(store.pos_map.astype(np.float32), path / POS_MAP_FILE)

    def dump(block: AttentionParams, d: Path):
        d.mkdir(parents=True, exist_ok=True)
        for name in _BLOCK_TENSORS:
            write_tensor(getattr(block, name).astype(np.float32), d / f"{name}.cmt")

    if store.schedule.mode == "iterative":
        dump(store.blocks[0], path)
    else:
        for t, block in enumerate(store.blocks):
            dump(block, path / f"block_{t}")


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse `key = value` lines; `#` starts a comment, blank lines ignored."""
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_parameter_store(path: str | Path) -> ParameterStore:
    """Load a store written by save_parameter_store."""
    path = Path(path)
    cfg_path = path / PARAMS_CFG
    if not cfg_path.exists():
        raise IoError(f"parameter config missing: {cfg_path}")
    cfg = parse_flat_config(cfg_path.read_text())
    try:
        channels = int(cfg["c"])
        steps = int(cfg["t"])
        mode = cfg["mode"]
        neighborhood = int(cfg.get("neighborhood", "8"))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad parameter config {cfg_path}: {exc}") from exc
    schedule = FlowSchedule(mode=mode, steps=steps, neighborhood=neighborhood)

    def load_block(d: Path) -> AttentionParams:
        tensors = {}
        for name in _BLOCK_TENSORS:
            p = d / f"{name}.cmt"
            if not p.exists():
                raise IoError(f"parameter tensor missing: {p}")
            tensors[name] = read_tensor(p)
        return AttentionParams(**tensors)

    if schedule.mode == "iterative":
        blocks = [load_block(path)]
    else:
        blocks = [load_block(path / f"block_{t}") for t in range(steps)]
    pos_map = read_tensor(path / POS_MAP_FILE) if (path / POS_MAP_FILE).exists() else None
    return ParameterStore(channels, schedule, blocks, pos_map=pos_map)


def run_message_flow(
    query: FeatureGrid,
    support: FeatureGrid,
    schedule: FlowSchedule,
    store: ParameterStore,
) -> tuple[FeatureGrid, FeatureGrid]:
    """Positional fusion followed by `steps` inner-then-cross passes.

    Iterative schedules reuse the store's single block every step; stacked
    schedules consume one block per step in order.
    """
    if query.channels != support.channels:
        raise ShapeMismatch(
            f"channel mismatch: query {query.channels} vs support {support.channels}"
        )
    if store.channels != query.channels:
        raise ConfigError(
            f"parameter store has C={store.channels}, features have C={query.channels}"
        )
    if len(store.blocks) != schedule.parameter_sets:
        raise ConfigError(
            f"{schedule.mode} schedule with T={schedule.steps} needs "
            f"{schedule.parameter_sets} parameter sets, store has {len(store.blocks)}"
        )

    encoder = PositionalEncoder(query.channels, linear_map=store.pos_map)
    q_state = GraphNodeState.from_grid(fuse_position(query, encoder.encode(query.height, query.width)))
    s_state = GraphNodeState.from_grid(fuse_position(support, encoder.encode(support.height, support.width)))

    for step in range(schedule.steps):
        params = store.blocks[0] if schedule.mode == "iterative" else store.blocks[step]
        q_state = inner_flow_step(q_state, params, schedule.neighborhood)
        s_state = inner_flow_step(s_state, params, schedule.neighborhood)
        q_state, s_state = cross_flow_step(q_state, s_state, params)

    return q_state.to_grid(), s_state.to_grid()
