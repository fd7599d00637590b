"""Modality-dedicated VGG-style backbones and their embedding taps.

A backbone is a stack of conv blocks (conv -> batch norm -> ReLU, repeated,
then a max-pool).  Embedding taps read a named pool output and reduce it to a
vector, either with ``maxpool + FC + ReLU`` or with a global average.
"""
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .layers import BatchNorm, Conv2D, Dense, Dropout, GlobalAvgPool, MaxPool2D, ReLU, Sequential
from .tensor import ConfigurationError, DimensionError, Parameter

VGG19_BLOCKS = ((2, 64), (2, 128), (4, 256), (4, 512), (4, 512))
DESK_BLOCKS = ((1, 64), (1, 128), (1, 512))


class SpecError(ConfigurationError):
    pass


@dataclass(frozen=True)
class TapSpec:
    """Where an embedding is read from and how the map is reduced.

    ``reducer`` is ``"maxpool<k>"`` (k x k pool, then FC to ``out_dim``) or
    ``"gap"`` (global average, ``out_dim`` equals the channel count).
    """

    tap_id: str
    source: str
    reducer: str = "maxpool1"
    out_dim: Optional[int] = None

    @property
    def pool_window(self) -> Optional[int]:
        if self.reducer == "gap":
            return None
        if not self.reducer.startswith("maxpool"):
            raise SpecError(f"tap {self.tap_id}: unknown reducer {self.reducer!r}")
        return int(self.reducer[len("maxpool"):] or 1)

    @classmethod
    def parse(cls, text: str, embedding_dim: int) -> "TapSpec":
        """Parse ``"FC3:pool1:maxpool4"`` style strings."""
        parts = [p.strip() for p in text.split(":")]
        if len(parts) not in (2, 3):
            raise SpecError(f"cannot parse tap {text!r}; expected id:source[:reducer]")
        reducer = parts[2] if len(parts) == 3 else "maxpool1"
        return cls(parts[0], parts[1], reducer, None if reducer == "gap" else embedding_dim)


@dataclass
class NetworkSpec:
    modality: str
    input_shape: Tuple[int, int, int]
    blocks: Sequence[Tuple[int, int]] = VGG19_BLOCKS
    pool_windows: Optional[Sequence[int]] = None
    width_scale: Union[Fraction, float] = 1
    embedding_dim: int = 1024
    taps: Sequence[TapSpec] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.blocks = tuple((int(c), int(b)) for c, b in self.blocks)
        if self.pool_windows is None:
            self.pool_windows = (2,) * len(self.blocks)
        self.pool_windows = tuple(int(w) for w in self.pool_windows)
        self.width_scale = Fraction(self.width_scale).limit_denominator(1 << 16)
        if not 0 < self.width_scale <= 1:
            raise SpecError(f"{self.modality}: width_scale must lie in (0, 1]")
        if len(self.pool_windows) != len(self.blocks):
            raise SpecError(f"{self.modality}: one pool window per block required")
        if not self.taps:
            self.taps = (TapSpec("FC6", f"pool{len(self.blocks)}", "maxpool1", self.embedding_dim),)

    def channels(self, base: int) -> int:
        return max(1, int(round(base * self.width_scale)))

    def layer_names(self) -> List[str]:
        names = []
        for b, (count, _) in enumerate(self.blocks, start=1):
            for i in range(1, count + 1):
                names.extend([f"conv{b}_{i}", f"bn{b}_{i}", f"relu{b}_{i}"])
            names.append(f"pool{b}")
        return names

    def trace(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Shape propagation through the trunk, in (C, H, W).  Allocates nothing."""
        c, h, w = self.input_shape
        rows = []
        for b, ((count, base), win) in enumerate(zip(self.blocks, self.pool_windows), start=1):
            c = self.channels(base)
            rows.append((f"conv{b}", (c, h, w)))
            if h % win or w % win:
                raise SpecError(f"{self.modality}: block {b} pool {win}x{win} does not divide "
                                f"extent {h}x{w}")
            h, w = h // win, w // win
            rows.append((f"pool{b}", (c, h, w)))
        return rows

    def tap_shapes(self) -> Dict[str, Dict[str, Tuple[int, ...]]]:
        """Per tap: source map shape, reduced map shape and embedding shape."""
        maps = dict(self.trace())
        out = {}
        for tap in self.taps:
            if tap.source not in maps or not tap.source.startswith("pool"):
                raise SpecError(f"tap {tap.tap_id} references unknown layer {tap.source!r}")
            c, h, w = maps[tap.source]
            win = tap.pool_window
            if win is None:
                out[tap.tap_id] = {"input": (c, h, w), "reduced": (c,), "embedding": (c,)}
                continue
            if h % win or w % win:
                raise SpecError(f"tap {tap.tap_id}: pool {win}x{win} does not divide extent {h}x{w}")
            out[tap.tap_id] = {"input": (c, h, w), "reduced": (c, h // win, w // win),
                               "embedding": (tap.out_dim,)}
        return out

    def validate(self) -> None:
        self.tap_shapes()
        ids = [t.tap_id for t in self.taps]
        if len(set(ids)) != len(ids):
            raise SpecError(f"{self.modality}: duplicate tap ids {ids}")

    def param_shapes(self) -> List[Tuple[str, List[Tuple[int, ...]]]]:
        """(layer, [parameter shapes]) rows without allocating any weights."""
        rows = []
        c_in = self.input_shape[0]
        for b, (count, base) in enumerate(self.blocks, start=1):
            c = self.channels(base)
            for i in range(1, count + 1):
                rows.append((f"conv{b}_{i}", [(c, c_in, 3, 3)]))
                rows.append((f"bn{b}_{i}", [(c,), (c,)]))
                c_in = c
        for tap, shp in self.tap_shapes().items():
            if len(shp["embedding"]) and shp["reduced"] != shp["embedding"]:
                fan_in = int(np.prod(shp["reduced"]))
                rows.append((tap, [(fan_in, shp["embedding"][0]), (shp["embedding"][0],)]))
        return rows


def table1_spec(modality: str, width_scale=1, multi_abstract: bool = True) -> NetworkSpec:
    """Full five-block geometry for ``face``, ``iris`` or ``fingerprint``."""
    shapes = {"face": (3, 224, 224), "iris": (1, 64, 512), "fingerprint": (1, 224, 224)}
    if modality not in shapes:
        raise SpecError(f"no reference geometry for modality {modality!r}")
    taps = [TapSpec("FC6", "pool5", "maxpool1", 1024)]
    if multi_abstract:
        taps.insert(0, TapSpec("FC3", "pool3", "maxpool4", 1024))
    return NetworkSpec(modality, shapes[modality], VGG19_BLOCKS, None, width_scale, 1024, taps)


def desk_spec(modality: str, input_shape=(1, 32, 32), width_scale=Fraction(1, 8), embedding_dim=128,
              blocks=DESK_BLOCKS, multi_abstract: bool = True) -> NetworkSpec:
    """Reduced instance: three blocks, shallow tap from pool1 pooled 4x4."""
    last = f"pool{len(blocks)}"
    taps = [TapSpec("FC6", last, "maxpool1", embedding_dim)]
    if multi_abstract:
        taps.insert(0, TapSpec("FC3", "pool1", "maxpool4", embedding_dim))
    return NetworkSpec(modality, input_shape, blocks, None, width_scale, embedding_dim, taps)


class ModalityNetwork:
    """Trunk + taps + optional standalone classifier (fed by the ``FC6`` tap)."""

    def __init__(self, spec: NetworkSpec, num_classes: Optional[int] = None, seed: int = 0,
                 keep_prob: float = 0.5, bn_decay: float = 0.99, dtype=np.float64,
                 classifier_tap: str = "FC6"):
        spec.validate()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        prefix = spec.modality
        self.trunk: List = []
        c_in = spec.input_shape[0]
        for b, ((count, base), win) in enumerate(zip(spec.blocks, spec.pool_windows), start=1):
            c = spec.channels(base)
            for i in range(1, count + 1):
                # bias is redundant in front of batch norm (beta absorbs it)
                self.trunk.append(Conv2D(c_in, c, 3, bias=False, rng=rng, dtype=dtype,
                                         name=f"{prefix}.conv{b}_{i}"))
                self.trunk.append(BatchNorm(c, bn_decay, dtype=dtype, name=f"{prefix}.bn{b}_{i}"))
                self.trunk.append(ReLU(f"{prefix}.relu{b}_{i}"))
                c_in = c
            self.trunk.append(MaxPool2D(win, name=f"{prefix}.pool{b}"))
        self._index = {layer.name.split(".", 1)[1]: k for k, layer in enumerate(self.trunk)}

        shapes = spec.tap_shapes()
        self.taps: Dict[str, Sequential] = {}
        self.tap_specs: Dict[str, TapSpec] = {}
        for tap in spec.taps:
            win = tap.pool_window
            if win is None:
                reducer = Sequential([GlobalAvgPool(f"{prefix}.{tap.tap_id}.gap")], f"{prefix}.{tap.tap_id}")
            else:
                fan_in = int(np.prod(shapes[tap.tap_id]["reduced"]))
                layers = [] if win == 1 else [MaxPool2D(win, name=f"{prefix}.{tap.tap_id}.pool")]
                layers += [Dense(fan_in, tap.out_dim, rng=rng, dtype=dtype, name=f"{prefix}.{tap.tap_id}"),
                           ReLU(f"{prefix}.{tap.tap_id}.relu")]
                reducer = Sequential(layers, f"{prefix}.{tap.tap_id}")
            self.taps[tap.tap_id] = reducer
            self.tap_specs[tap.tap_id] = tap

        self.classifier_tap = classifier_tap
        self.classifier: Optional[Dense] = None
        self.dropout = Dropout(keep_prob, seed=seed + 7919, name=f"{prefix}.dropout")
        if num_classes is not None:
            if classifier_tap not in self.taps:
                raise SpecError(f"classifier tap {classifier_tap!r} not among taps {list(self.taps)}")
            dim = shapes[classifier_tap]["embedding"][0]
            self.classifier = Dense(dim, num_classes, rng=rng, dtype=dtype, name=f"{prefix}.classifier")

    @property
    def modality(self):
        return self.spec.modality

    # parameters ----------------------------------------------------------
    def trunk_params(self) -> List[Parameter]:
        return [p for layer in self.trunk for p in layer.params()]

    def tap_params(self, tap_ids=None) -> List[Parameter]:
        ids = self.taps if tap_ids is None else tap_ids
        return [p for t in ids for p in self.taps[t].params()]

    def classifier_params(self) -> List[Parameter]:
        return self.classifier.params() if self.classifier is not None else []

    def params(self) -> List[Parameter]:
        return self.trunk_params() + self.tap_params() + self.classifier_params()

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for layer in self.trunk:
            out.update(layer.buffers())
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {p.name: p.value for p in self.params()}
        out.update(self.buffers())
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        targets = {p.name: p.value for p in self.params()}
        targets.update(self.buffers())
        for name, arr in targets.items():
            if name not in state:
                raise KeyError(f"checkpoint lacks {name}")
            if state[name].shape != arr.shape:
                raise DimensionError(f"{name}: checkpoint shape {state[name].shape} != {arr.shape}")
            arr[...] = state[name]

    def drop_classifier(self) -> None:
        self.classifier = None

    # forward / backward ----------------------------------------------------
    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise DimensionError(f"{self.modality}: expected N x {self.spec.input_shape} input, got {x.shape}")

    def source_maps(self, x, training=False, sources=None) -> Dict[str, np.ndarray]:
        """Run the trunk, returning the maps the taps read from."""
        self._check_input(x)
        x = x.astype(self.dtype, copy=False)
        sources = set(sources or (t.source for t in self.tap_specs.values()))
        last = max(self._index[s] for s in sources)
        maps = {}
        for k, layer in enumerate(self.trunk[:last + 1]):
            x = layer.forward(x, training)
            short = layer.name.split(".", 1)[1]
            if short in sources:
                maps[short] = x
        self._last_run = last
        return maps

    def taps_forward(self, maps, training=False, tap_ids=None) -> Dict[str, np.ndarray]:
        ids = list(self.taps) if tap_ids is None else tap_ids
        return {t: self.taps[t].forward(maps[self.tap_specs[t].source], training) for t in ids}

    def taps_backward(self, d_emb: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        d_maps: Dict[str, np.ndarray] = {}
        for t, g in d_emb.items():
            src = self.tap_specs[t].source
            dm = self.taps[t].backward(g)
            d_maps[src] = d_maps[src] + dm if src in d_maps else dm
        return d_maps

    def trunk_backward(self, d_maps: Dict[str, np.ndarray]):
        dout = None
        for k in range(self._last_run, -1, -1):
            layer = self.trunk[k]
            short = layer.name.split(".", 1)[1]
            if short in d_maps:
                dout = d_maps[short] if dout is None else dout + d_maps[short]
            if dout is not None:
                dout = layer.backward(dout)
        return dout

    def forward(self, x, training=False, tap_ids=None):
        """Returns ``(embeddings, logits)``; logits is ``None`` without a classifier."""
        ids = list(self.taps) if tap_ids is None else list(tap_ids)
        if self.classifier is not None and self.classifier_tap not in ids:
            ids.append(self.classifier_tap)
        maps = self.source_maps(x, training, [self.tap_specs[t].source for t in ids])
        emb = self.taps_forward(maps, training, ids)
        logits = None
        if self.classifier is not None:
            h = self.dropout.forward(emb[self.classifier_tap], training)
            logits = self.classifier.forward(h, training)
        return emb, logits

    def backward(self, d_emb=None, d_logits=None):
        d_emb = dict(d_emb or {})
        if d_logits is not None:
            g = self.dropout.backward(self.classifier.backward(d_logits))
            t = self.classifier_tap
            d_emb[t] = d_emb[t] + g if t in d_emb else g
        return self.trunk_backward(self.taps_backward(d_emb))


def build_network(spec: NetworkSpec, taps: Optional[Sequence[TapSpec]] = None, num_classes: Optional[int] = None,
                  seed: int = 0, **kwargs) -> ModalityNetwork:
    if taps is not None:
        spec = NetworkSpec(spec.modality, spec.input_shape, spec.blocks, spec.pool_windows, spec.width_scale,
                           spec.embedding_dim, list(taps))
    return ModalityNetwork(spec, num_classes=num_classes, seed=seed, **kwargs)


def _count(shapes):
    return sum(int(np.prod(s)) for s in shapes)


def parameter_report(net) -> List[Tuple[str, int]]:
    """(layer, parameter count) rows; accepts a built network or a bare spec.

    The spec path never allocates weights, so full-scale geometries are cheap.
    """
    if net is None:
        return []
    if isinstance(net, NetworkSpec):
        return [(name, _count(shapes)) for name, shapes in net.param_shapes()]
    rows: Dict[str, int] = {}
    for p in net.params():
        layer = p.name.rsplit(".", 1)[0]
        rows[layer] = rows.get(layer, 0) + p.value.size
    return list(rows.items())


def fc_stack_params(in_features: int, widths: Sequence[int]) -> int:
    """Weights plus biases of a chain of FC layers."""
    total, fan_in = 0, in_features
    for w in widths:
        total += fan_in * w + w
        fan_in = w
    return total
