"""Joint-representation heads over modality embeddings, plus the score-level
CNN-Sum / CNN-Major baselines.
"""
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .layers import Dense, Dropout, ReLU
from .modality import ModalityNetwork
from .tensor import ConfigurationError, DimensionError, Parameter, checksum

FEATURE_KINDS = ("weighted", "multi_abstract", "bilevel_weighted", "bilevel_multi_abstract")
SCORE_KINDS = ("score_sum", "score_major")
KINDS = FEATURE_KINDS + SCORE_KINDS


def taps_for(kind: str) -> Tuple[str, ...]:
    if kind in ("multi_abstract", "bilevel_multi_abstract"):
        return ("FC3", "FC6")
    return ("FC6",)


class FusionHead:
    """Per-group ``concat -> dropout -> FC(fusion_dim) -> ReLU``, then a linear
    classification layer over the concatenated group outputs.

    Within a group the inputs are concatenated tap-major in the declared
    modality order: ``FC3_m1, FC3_m2, ..., FC6_m1, FC6_m2, ...``.
    """

    def __init__(self, kind: str, modalities: Sequence[str], embedding_dims: Mapping[Tuple[str, str], int],
                 num_classes: int, fusion_dim: int = 1024, groups: Optional[Sequence[Sequence[str]]] = None,
                 taps_used: Optional[Sequence[str]] = None, keep_prob: float = 0.5, seed: int = 0,
                 dtype=np.float64):
        if kind not in KINDS:
            raise ConfigurationError(f"unknown fusion kind {kind!r}; expected one of {KINDS}")
        if kind in SCORE_KINDS:
            raise ConfigurationError(f"{kind} is a score-level rule; use score_sum / score_major")
        self.kind = kind
        self.modalities = list(modalities)
        if not self.modalities:
            raise ConfigurationError("fusion head needs at least one modality")
        if kind.startswith("bilevel"):
            if groups is None:
                raise ConfigurationError(f"{kind} requires modality groups")
            groups = [list(g) for g in groups]
            flat = [m for g in groups for m in g]
            if len(groups) < 2 or any(not g for g in groups) or sorted(flat) != sorted(self.modalities) \
                    or len(set(flat)) != len(flat):
                raise ConfigurationError(f"{kind}: groups {groups} must partition {self.modalities} "
                                         "into >= 2 disjoint non-empty groups")
        else:
            groups = [list(self.modalities)]
        self.groups = groups
        self.taps_used = tuple(taps_used) if taps_used is not None else taps_for(kind)
        self.num_classes = num_classes
        self.fusion_dim = fusion_dim
        rng = np.random.default_rng(seed)
        self.group_inputs: List[List[Tuple[str, str]]] = []
        self.group_fc: List[Dense] = []
        self.dropouts: List[Dropout] = []
        self.relus: List[ReLU] = []
        for g, members in enumerate(groups):
            keys = [(m, t) for t in self.taps_used for m in members]
            for key in keys:
                if key not in embedding_dims:
                    raise ConfigurationError(f"missing embedding tap {key[1]} for modality {key[0]}")
            width = sum(embedding_dims[k] for k in keys)
            self.group_inputs.append(keys)
            self.dropouts.append(Dropout(keep_prob, seed=seed * 31 + g, name=f"fusion.g{g}.dropout"))
            self.group_fc.append(Dense(width, fusion_dim, rng=rng, dtype=dtype, name=f"fusion.g{g}.fc"))
            self.relus.append(ReLU(f"fusion.g{g}.relu"))
        self.classifier = Dense(fusion_dim * len(groups), num_classes, rng=rng, dtype=dtype,
                                name="fusion.classifier")

    @property
    def input_widths(self) -> List[int]:
        return [fc.in_features for fc in self.group_fc]

    def params(self) -> List[Parameter]:
        return [p for fc in self.group_fc for p in fc.params()] + self.classifier.params()

    def required_taps(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {}
        for keys in self.group_inputs:
            for m, t in keys:
                out.setdefault(m, [])
                if t not in out[m]:
                    out[m].append(t)
        return out

    def forward(self, embeddings: Mapping[Tuple[str, str], np.ndarray], training=False) -> np.ndarray:
        batch = None
        outs = []
        self._splits = []
        for g, keys in enumerate(self.group_inputs):
            parts = []
            for key in keys:
                if key not in embeddings:
                    raise ConfigurationError(f"missing embedding tap {key[1]} for modality {key[0]}")
                e = embeddings[key]
                if batch is None:
                    batch = e.shape[0]
                elif e.shape[0] != batch:
                    raise DimensionError(f"batch extent mismatch at {key}: {e.shape[0]} != {batch}")
                parts.append(e)
            self._splits.append(np.cumsum([p.shape[1] for p in parts])[:-1])
            h = np.concatenate(parts, axis=1)
            h = self.dropouts[g].forward(h, training)
            h = self.relus[g].forward(self.group_fc[g].forward(h, training))
            outs.append(h)
        z = np.concatenate(outs, axis=1)
        return self.classifier.forward(z, training)

    def backward(self, dlogits) -> Dict[Tuple[str, str], np.ndarray]:
        dz = self.classifier.backward(dlogits)
        d_emb = {}
        for g, keys in enumerate(self.group_inputs):
            dh = dz[:, g * self.fusion_dim:(g + 1) * self.fusion_dim]
            dh = self.group_fc[g].backward(self.relus[g].backward(dh))
            dh = self.dropouts[g].backward(dh)
            for key, piece in zip(keys, np.split(dh, self._splits[g], axis=1)):
                d_emb[key] = piece
        return d_emb


class FusionNetwork:
    """Modality backbones joined by a :class:`FusionHead`.

    With ``frozen=True`` the trunks run in inference mode and only taps and
    head receive gradients; cached trunk maps may be passed in via ``maps``.
    """

    def __init__(self, backbones: Mapping[str, ModalityNetwork], head: FusionHead):
        self.backbones = dict(backbones)
        self.head = head
        for m in head.modalities:
            if m not in self.backbones:
                raise ConfigurationError(f"no backbone for modality {m!r}")
        self.required = head.required_taps()
        for m, taps in self.required.items():
            for t in taps:
                if t not in self.backbones[m].taps:
                    raise ConfigurationError(f"missing embedding tap {t} for modality {m}")

    @property
    def modalities(self):
        return self.head.modalities

    def trunk_params(self) -> List[Parameter]:
        return [p for m in self.modalities for p in self.backbones[m].trunk_params()]

    def tap_params(self) -> List[Parameter]:
        return [p for m in self.modalities for p in self.backbones[m].tap_params(self.required[m])]

    def head_params(self) -> List[Parameter]:
        return self.head.params()

    def params(self) -> List[Parameter]:
        return self.trunk_params() + self.tap_params() + self.head_params()

    def trunk_maps(self, X: Mapping[str, np.ndarray], training=False) -> Dict[str, Dict[str, np.ndarray]]:
        out = {}
        for m in self.modalities:
            net = self.backbones[m]
            out[m] = net.source_maps(X[m], training, [net.tap_specs[t].source for t in self.required[m]])
        return out

    def forward(self, X: Mapping[str, np.ndarray], training=False, frozen=False, maps=None) -> np.ndarray:
        self._frozen = frozen
        if maps is None:
            maps = self.trunk_maps(X, training and not frozen)
        emb = {}
        for m in self.modalities:
            taps = self.backbones[m].taps_forward(maps[m], training, self.required[m])
            for t, e in taps.items():
                emb[(m, t)] = e
        return self.head.forward(emb, training)

    def backward(self, dlogits) -> None:
        d_emb = self.head.backward(dlogits)
        for m in self.modalities:
            net = self.backbones[m]
            d_maps = net.taps_backward({t: d_emb[(m, t)] for t in self.required[m]})
            if not self._frozen:
                net.trunk_backward(d_maps)

    def trunk_checksum(self) -> str:
        """Digest of every backbone trunk weight and batch-norm buffer."""
        state = {p.name: p.value for p in self.trunk_params()}
        for m in self.modalities:
            state.update(self.backbones[m].buffers())
        return checksum(state)

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {}
        for m in self.modalities:
            out.update(self.backbones[m].state_dict())
        out.update({p.name: p.value for p in self.head.params()})
        return out


def _stack(scores) -> np.ndarray:
    if len(scores) == 0:
        raise ValueError("score fusion needs at least one score vector")
    arr = np.asarray([np.asarray(s, dtype=np.float64) for s in scores])
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected (M, K) or (M, N, K) scores, got {arr.shape}")
    return arr


def score_sum(scores):
    """Argmax of the summed probability vectors; ties go to the lowest class.

    ``scores`` is a list over modalities of (K,) vectors or (N, K) matrices.
    """
    arr = _stack(scores)
    return np.argmax(arr.sum(axis=0), axis=-1)


def score_major(scores):
    """Plurality vote of per-modality argmaxes.

    Tied vote counts are broken by the summed probability over the tied
    classes, then by the lowest class index.
    """
    arr = _stack(scores)
    single = arr.ndim == 2
    if single:
        arr = arr[:, None, :]
    m, n, k = arr.shape
    votes = np.zeros((n, k))
    winners = arr.argmax(axis=2)
    for j in range(m):
        votes[np.arange(n), winners[j]] += 1
    total = arr.sum(axis=0)
    top = votes == votes.max(axis=1, keepdims=True)
    out = np.argmax(np.where(top, total, -np.inf), axis=1)
    return out[0] if single else out
