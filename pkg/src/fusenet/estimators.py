"""scikit-learn style estimators wrapping the three-phase training schedule.

``ModalityCNNClassifier`` trains one modality-dedicated network (phase 1).
``FusionNetClassifier`` joins pretrained networks with a fusion head, trains
the head on frozen backbones (phase 2) and then everything jointly (phase 3).
``ScoreFusionClassifier`` combines independently trained networks at the
score level (CNN-Sum / CNN-Major).
"""
import copy
from typing import Dict, Mapping, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted

from .fusion import FEATURE_KINDS, FusionHead, FusionNetwork, score_major, score_sum
from .modality import ModalityNetwork, NetworkSpec, desk_spec
from .synthdata import AugmentConfig, augment_set
from .tensor import ConfigurationError
from .train import Phase, TrainConfig, TrainingLog, joint_phase_config, predict_logits, predict_proba, run_phase
from .validation import check_images, check_multimodal


def _encode(y, classes=None):
    y = np.asarray(y)
    if classes is None:
        classes = np.unique(y)
    idx = np.searchsorted(classes, y)
    idx = np.clip(idx, 0, len(classes) - 1)
    if not np.all(classes[idx] == y):
        raise ValueError("labels contain classes unseen during fit")
    return classes, idx


class ModalityCNNClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """One modality-dedicated CNN trained with softmax cross-entropy.

    ``transform`` returns the FC6 embedding (the classifier's input).
    """

    def __init__(self, spec: Optional[NetworkSpec] = None, train_config: Optional[TrainConfig] = None,
                 augment: Optional[AugmentConfig] = None, dtype="float64", random_state=0):
        self.spec = spec
        self.train_config = train_config
        self.augment = augment
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X, dtype=self.dtype)
        self.classes_, yi = _encode(y)
        cfg = self.train_config or TrainConfig()
        spec = self.spec or desk_spec("modality", input_shape=X.shape[1:])
        if self.augment is not None:
            X, yi = augment_set(X, yi, self.augment, seed=self.random_state)
        self.net_ = ModalityNetwork(spec, num_classes=len(self.classes_), seed=self.random_state,
                                    keep_prob=cfg.keep_prob, bn_decay=cfg.bn_decay, dtype=self.dtype)
        if X_val is not None:
            X_val = check_images(X_val, dtype=self.dtype)
            y_val = _encode(y_val, self.classes_)[1]
        self.log_ = run_phase(Phase("pretrain_modality"), self.net_, X, yi, cfg, X_val, y_val)
        self.final_lr_ = self.log_.final_lr
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return predict_proba(self.net_, check_images(X, dtype=self.dtype))

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        return predict_logits(self.net_, check_images(X, dtype=self.dtype))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = check_images(X, dtype=self.dtype)
        tap = self.net_.classifier_tap
        return np.concatenate([self.net_.forward(X[i:i + 256], False, [tap])[0][tap]
                               for i in range(0, len(X), 256)])


class FusionNetClassifier(ClassifierMixin, BaseEstimator):
    """Multi-stream CNN with a jointly optimized feature-level fusion head.

    Parameters
    ----------
    kind : one of ``weighted``, ``multi_abstract``, ``bilevel_weighted``,
        ``bilevel_multi_abstract``.
    modalities : modality names, fixing the concatenation order.
    spec : a :class:`NetworkSpec` shared by all modalities, or a mapping
        modality -> spec.  Must expose the FC3 tap for multi-abstract kinds.
    groups : modality groups for the bi-level kinds.
    pretrained : optional mapping modality -> fitted
        :class:`ModalityCNNClassifier`; phase 1 is skipped and the networks are
        deep-copied, so the same pretrained set can seed several heads.
    """

    def __init__(self, kind="multi_abstract", modalities=None, spec=None, groups=None, fusion_dim=128,
                 pretrain_config: Optional[TrainConfig] = None, fusion_config: Optional[TrainConfig] = None,
                 joint_config: Optional[TrainConfig] = None, pretrained: Optional[Mapping] = None,
                 dtype="float64", random_state=0):
        self.kind = kind
        self.modalities = modalities
        self.spec = spec
        self.groups = groups
        self.fusion_dim = fusion_dim
        self.pretrain_config = pretrain_config
        self.fusion_config = fusion_config
        self.joint_config = joint_config
        self.pretrained = pretrained
        self.dtype = dtype
        self.random_state = random_state

    def _spec_for(self, m, shape):
        if isinstance(self.spec, Mapping):
            return self.spec[m]
        base = self.spec or desk_spec(m, input_shape=shape)
        return NetworkSpec(m, base.input_shape, base.blocks, base.pool_windows, base.width_scale,
                           base.embedding_dim, list(base.taps))

    def fit(self, X, y):
        if self.kind not in FEATURE_KINDS:
            raise ConfigurationError(f"kind must be one of {FEATURE_KINDS}, got {self.kind!r}")
        mods = list(self.modalities) if self.modalities is not None else \
            (list(X) if isinstance(X, Mapping) else None)
        X = check_multimodal(X, mods, dtype=self.dtype)
        self.modalities_ = mods
        self.classes_, yi = _encode(y)
        pretrained = dict(self.pretrained or {})
        for k, m in enumerate(mods):
            if m not in pretrained:
                est = ModalityCNNClassifier(self._spec_for(m, X[m].shape[1:]), self.pretrain_config,
                                            dtype=self.dtype, random_state=self.random_state + 101 * (k + 1))
                pretrained[m] = est.fit(X[m], y)
            if not np.array_equal(pretrained[m].classes_, self.classes_):
                raise ValueError(f"pretrained {m} network was fitted on different classes")
        self.pretrained_final_lrs_ = {m: float(pretrained[m].final_lr_) for m in mods}
        backbones = {}
        for m in mods:
            net = copy.deepcopy(pretrained[m].net_)
            net.drop_classifier()
            backbones[m] = net
        dims = {}
        for m, net in backbones.items():
            for t, shp in net.spec.tap_shapes().items():
                dims[(m, t)] = shp["embedding"][0]
        fcfg = self.fusion_config or TrainConfig()
        head = FusionHead(self.kind, mods, dims, len(self.classes_), self.fusion_dim, self.groups,
                          keep_prob=fcfg.keep_prob, seed=self.random_state + 7, dtype=self.dtype)
        self.net_ = FusionNetwork(backbones, head)
        self.log_ = TrainingLog()
        before = self.net_.trunk_checksum()
        self.log_.extend(run_phase(Phase("frozen_fusion"), self.net_, X, yi, fcfg))
        self.frozen_checksums_ = (before, self.net_.trunk_checksum())
        jcfg = joint_phase_config(self.joint_config or fcfg, list(self.pretrained_final_lrs_.values()),
                                  fcfg.batch_size)
        self.joint_config_ = jcfg
        self.log_.extend(run_phase(Phase("joint"), self.net_, X, yi, jcfg))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return predict_proba(self.net_, check_multimodal(X, self.modalities_, dtype=self.dtype))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class ScoreFusionClassifier(ClassifierMixin, BaseEstimator):
    """Score-level fusion of independently trained modality networks.

    ``rule='sum'`` adds the probability vectors; ``rule='major'`` takes a
    plurality vote, breaking ties by summed probability.
    """

    def __init__(self, rule="sum", modalities=None, estimators: Optional[Mapping] = None,
                 base_estimator: Optional[ModalityCNNClassifier] = None):
        self.rule = rule
        self.modalities = modalities
        self.estimators = estimators
        self.base_estimator = base_estimator

    def fit(self, X, y):
        if self.rule not in ("sum", "major"):
            raise ConfigurationError(f"rule must be 'sum' or 'major', got {self.rule!r}")
        mods = list(self.modalities) if self.modalities is not None else list(self.estimators or X)
        self.modalities_ = mods
        self.classes_ = np.unique(y)
        ests = dict(self.estimators or {})
        for m in mods:
            if m not in ests:
                base = self.base_estimator or ModalityCNNClassifier()
                ests[m] = clone(base).fit(X[m], y)
        self.estimators_ = ests
        return self

    def modality_scores(self, X):
        check_is_fitted(self, "estimators_")
        return [self.estimators_[m].predict_proba(X[m]) for m in self.modalities_]

    def predict_proba(self, X):
        scores = np.stack(self.modality_scores(X))
        total = scores.sum(axis=0)
        if self.rule == "sum":
            return total / len(scores)
        votes = np.zeros_like(total)
        for s in scores:
            votes[np.arange(len(s)), s.argmax(axis=1)] += 1
        # summed probability (< M + 1) only reorders classes with equal votes
        ranked = votes + total / (len(scores) + 1)
        return ranked / ranked.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.modality_scores(X)
        idx = score_sum(scores) if self.rule == "sum" else score_major(scores)
        return self.classes_[idx]
