"""Training orchestration, full-chain inference, evaluation, checkpoints.

The staged model trains its three stages independently: every stage
consumes ground-truth targets from the stage before it, never predictions
(the provenance flags assert this).  At test time the chain runs on
predictions only, unless an intervention explicitly overrides one of the
two bottlenecks.

Variants (ablation wiring):

    staged       observer -> conceiver -> interaction + predictor
    staged-noci  observer -> conceiver -> predictor (no interaction)
    cbm          conceiver on the raw image -> interaction-free predictor
    cbm-ci       conceiver on the raw image -> interaction + predictor
    seg-only     observer -> classifier head on the masked stack
    end-to-end   same macro-architecture, single cross-entropy training
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tensor
from .conceiver import (ConceptConceiver, EncoderClassifier, EncoderNet,
                        add_coord_channels)
from .interaction import InteractionClassifier, PredictorMLP
from .layers import Conv2d, Module
from .losses import cross_entropy_loss
from .metrics import classification_metrics, concept_metrics, iou_per_class
from .observer import (GROUND_TRUTH, PREDICTED, MaskedStack,
                       SegmentationObserver, one_hot_masks, soft_mask)
from .schema import ConceptSchema, load_schema
from .serialize import CheckpointError, load_tensors, save_tensors
from .synth import GeoDataset
from .training import run_training
from .validation import check_labels

VARIANTS = ("staged", "staged-noci", "cbm", "cbm-ci", "seg-only", "end-to-end")

_VARIANT_STAGES = {
    "staged": {"observer", "conceiver", "classifier"},
    "staged-noci": {"observer", "conceiver", "classifier"},
    "cbm": {"conceiver", "classifier"},
    "cbm-ci": {"conceiver", "classifier"},
    "seg-only": {"observer", "stack_classifier"},
    "end-to-end": {"end_to_end"},
}


@dataclass
class StageConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-6
    lr_patience: int = 10


@dataclass
class ExperimentConfig:
    """Hyperparameters for one training run of one variant."""

    variant: str = "staged"
    seed: int = 0
    dtype: str = "float64"
    observer: StageConfig = field(default_factory=lambda: StageConfig(
        epochs=30, batch_size=8))
    conceiver: StageConfig = field(default_factory=lambda: StageConfig(epochs=50))
    predictor: StageConfig = field(default_factory=lambda: StageConfig(epochs=50))
    observer_widths: tuple = (16, 32, 64, 128)
    conceiver_widths: tuple = (24, 48, 96)
    predictor_hidden: int = 1024
    eps_width: int = 12

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("variant", "seed", "dtype", "observer_widths",
              "conceiver_widths", "predictor_hidden", "eps_width")}
        for stage in ("observer", "conceiver", "predictor"):
            d[stage] = vars(getattr(self, stage)).copy()
        return d

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        kw = dict(d)
        for stage in ("observer", "conceiver", "predictor"):
            if stage in kw and isinstance(kw[stage], dict):
                kw[stage] = StageConfig(**kw[stage])
        for key in ("observer_widths", "conceiver_widths"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


class EndToEndNet(Module):
    """Observer/conceiver/predictor macro-shape trained as one black box.

    The soft-masking step is replaced by a learned 1x1 convolution mixing
    the segmentation features with the image.
    """

    def __init__(self, rng, in_channels, n_seg, d, n_classes,
                 observer_widths, conceiver_widths, hidden):
        super().__init__()
        from .observer import ObserverNet
        self.backbone = self.add_child(
            "backbone", ObserverNet(rng, in_channels, n_seg, observer_widths))
        self.mix = self.add_child(
            "mix", Conv2d(rng, n_seg + in_channels, n_seg, k=1, stride=1, pad=0))
        self.encoder = self.add_child(
            "encoder", EncoderNet(rng, n_seg + 2, d, conceiver_widths))
        self.head = self.add_child("head", PredictorMLP(rng, d, n_classes, hidden))

    def __call__(self, x: Tensor) -> Tensor:
        seg = self.backbone(x)
        mixed = self.mix(ad.concat([seg, x]))
        return self.head(self.encoder(mixed))


class EndToEndClassifier(BaseEstimator):
    def __init__(self, n_classes=None, n_seg=10, concept_dim=18,
                 observer_widths=(16, 32, 64, 128), conceiver_widths=(24, 48, 96),
                 hidden=1024, epochs=50, batch_size=16, lr=1e-4,
                 weight_decay=1e-6, lr_patience=10, seed=0, dtype="float64"):
        self.n_classes = n_classes
        self.n_seg = n_seg
        self.concept_dim = concept_dim
        self.observer_widths = observer_widths
        self.conceiver_widths = conceiver_widths
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_patience = lr_patience
        self.seed = seed
        self.dtype = dtype

    def _np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def fit(self, X, y, X_val=None, y_val=None, train_index_list=None):
        ad.DEFAULT_DTYPE = self._np_dtype()
        X = np.asarray(X, dtype=self._np_dtype())
        k = self.n_classes or int(np.max(y)) + 1
        y = check_labels(y, k)
        Xv = np.asarray(X_val, dtype=self._np_dtype()) if X_val is not None else X
        yv = check_labels(y_val, k) if y_val is not None else y
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 53)))
        self.net_ = EndToEndNet(rng, X.shape[-1], self.n_seg, self.concept_dim,
                                k, self.observer_widths, self.conceiver_widths,
                                self.hidden)
        self.n_classes_ = k
        self.net_in_channels_ = X.shape[-1]
        indices = (np.asarray(train_index_list)
                   if train_index_list is not None else np.arange(len(X)))

        def step(batch):
            return cross_entropy_loss(self.net_(Tensor(X[batch])), y[batch])

        def val_loss():
            total, n = 0.0, 0
            with ad.no_grad():
                for lo in range(0, len(Xv), 32):
                    sl = slice(lo, lo + 32)
                    total += float(cross_entropy_loss(
                        self.net_(Tensor(Xv[sl])), yv[sl]).data) * len(yv[sl])
                    n += len(yv[sl])
            return total / max(n, 1)

        self.history_ = run_training(
            self.net_, indices, step, val_loss, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, seed=self.seed,
            lr_patience=self.lr_patience)
        return self

    def predict_proba(self, X):
        X = np.asarray(X, dtype=self._np_dtype())
        self.net_.train(False)
        outs = []
        with ad.no_grad():
            for lo in range(0, len(X), 32):
                z = self.net_(Tensor(X[lo:lo + 32])).data.astype(np.float64)
                z = z - z.max(axis=1, keepdims=True)
                e = np.exp(z)
                outs.append(e / e.sum(axis=1, keepdims=True))
        return np.concatenate(outs)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


@dataclass
class ModelBundle:
    """Everything needed for full-chain inference of one trained variant."""

    variant: str
    schema: ConceptSchema
    schema_text: str
    config: ExperimentConfig
    observer: SegmentationObserver | None = None
    conceiver: ConceptConceiver | None = None
    classifier: InteractionClassifier | None = None
    stack_classifier: EncoderClassifier | None = None
    end_to_end: EndToEndClassifier | None = None
    provenance: dict = field(default_factory=dict)

    def stages(self) -> dict:
        out = {}
        for name in ("observer", "conceiver", "classifier", "stack_classifier",
                     "end_to_end"):
            est = getattr(self, name)
            if est is not None:
                out[name] = est
        return out

    def has(self, stage) -> bool:
        return getattr(self, stage, None) is not None

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, est in sorted(self.stages().items()):
            for pname, p in est.net_.parameters():
                h.update(f"{name}.{pname}".encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def anatomy_class_map(schema: ConceptSchema) -> dict:
    return {i: (schema.anatomy_of_label(lab), lab.endswith(" SP"))
            for i, lab in enumerate(schema.class_labels)}


def check_stage_disjointness(bundle: ModelBundle) -> bool:
    """No parameter tensor may be shared between two trained stages."""
    seen: dict[int, str] = {}
    for sname, est in bundle.stages().items():
        for pname, p in est.net_.parameters():
            if id(p) in seen:
                raise AssertionError(
                    f"parameter {pname} shared between {seen[id(p)]} and {sname}")
            seen[id(p)] = sname
    return True


def train_all(config: ExperimentConfig, dataset: GeoDataset,
              log_fn=None) -> ModelBundle:
    """Independent three-stage training (or variant-specific wiring)."""
    if config.variant not in VARIANTS:
        raise ValueError(f"unknown variant {config.variant!r}; pick from {VARIANTS}")
    schema = dataset.schema
    say = log_fn or (lambda msg: None)
    tr, va = dataset.splits["train"], dataset.splits["val"]
    images_tr = dataset.images(tr)
    images_va = dataset.images(va)
    C_tr = dataset.concept_matrix(tr)
    C_va = dataset.concept_matrix(va)
    y_tr = dataset.label_indices(tr)
    y_va = dataset.label_indices(va)
    schema_text = getattr(schema, "_source_text", "")

    bundle = ModelBundle(variant=config.variant, schema=schema,
                         schema_text=schema_text, config=config)
    needs = _VARIANT_STAGES[config.variant]

    # oversampling list indexes into the *training subset* order
    pos_of = {g: i for i, g in enumerate(tr)}
    over_local = np.array([pos_of[g] for g in dataset.oversample_train], dtype=int)

    if "observer" in needs:
        say("training observer (image -> masks)")
        obs = SegmentationObserver(
            n_classes=schema.n_segmentation, widths=config.observer_widths,
            epochs=config.observer.epochs, batch_size=config.observer.batch_size,
            lr=config.observer.lr, weight_decay=config.observer.weight_decay,
            lr_patience=config.observer.lr_patience, seed=config.seed,
            dtype=config.dtype)
        obs.fit(images_tr, dataset.masks(tr), images_va, dataset.masks(va))
        bundle.observer = obs

    if "conceiver" in needs:
        if config.variant.startswith("cbm"):
            say("training conceiver on raw images (no segmentation stage)")
            x_tr, x_va = images_tr, images_va
        else:
            say("training conceiver on ground-truth masked stacks")
            x_tr = soft_mask(one_hot_masks(dataset.masks(tr), schema.n_segmentation),
                             images_tr, source=GROUND_TRUTH)
            x_va = soft_mask(one_hot_masks(dataset.masks(va), schema.n_segmentation),
                             images_va, source=GROUND_TRUTH)
        con = ConceptConceiver(
            n_concepts=schema.n_properties,
            binary_indices=tuple(schema.binary_indices),
            scalar_indices=tuple(schema.scalar_indices),
            widths=config.conceiver_widths, epochs=config.conceiver.epochs,
            batch_size=config.conceiver.batch_size, lr=config.conceiver.lr,
            weight_decay=config.conceiver.weight_decay,
            lr_patience=config.conceiver.lr_patience, seed=config.seed,
            dtype=config.dtype)
        con.fit(x_tr, C_tr, x_va, C_va)
        bundle.conceiver = con
        bundle.provenance["conceiver_train_source"] = (
            "raw-image" if config.variant.startswith("cbm") else GROUND_TRUTH)

    if "classifier" in needs:
        say("training predictor on ground-truth concepts")
        use_ci = config.variant in ("staged", "cbm-ci")
        clf = InteractionClassifier(
            n_classes=schema.n_classes,
            binary_indices=tuple(schema.binary_indices),
            hidden=config.predictor_hidden, eps_width=config.eps_width,
            use_interaction=use_ci, epochs=config.predictor.epochs,
            batch_size=config.predictor.batch_size, lr=config.predictor.lr,
            weight_decay=config.predictor.weight_decay,
            lr_patience=config.predictor.lr_patience, seed=config.seed,
            dtype=config.dtype)
        clf.fit(C_tr, y_tr, C_va, y_va, train_index_list=over_local)
        bundle.classifier = clf
        bundle.provenance["predictor_train_source"] = GROUND_TRUTH

    if "stack_classifier" in needs:
        say("training classifier head on ground-truth masked stacks")
        x_tr = soft_mask(one_hot_masks(dataset.masks(tr), schema.n_segmentation),
                         images_tr, source=GROUND_TRUTH)
        x_va = soft_mask(one_hot_masks(dataset.masks(va), schema.n_segmentation),
                         images_va, source=GROUND_TRUTH)
        sc = EncoderClassifier(
            n_classes=schema.n_classes, widths=config.conceiver_widths,
            epochs=config.predictor.epochs, batch_size=config.predictor.batch_size,
            lr=config.conceiver.lr, weight_decay=config.predictor.weight_decay,
            lr_patience=config.predictor.lr_patience, seed=config.seed,
            dtype=config.dtype)
        sc.fit(x_tr, y_tr, x_va, y_va, train_index_list=over_local)
        bundle.stack_classifier = sc
        bundle.provenance["stack_classifier_train_source"] = GROUND_TRUTH

    if "end_to_end" in needs:
        say("training end-to-end baseline")
        e2e = EndToEndClassifier(
            n_classes=schema.n_classes, n_seg=schema.n_segmentation,
            concept_dim=schema.n_properties,
            observer_widths=config.observer_widths,
            conceiver_widths=config.conceiver_widths,
            hidden=config.predictor_hidden, epochs=config.predictor.epochs,
            batch_size=16, lr=config.predictor.lr,
            weight_decay=config.predictor.weight_decay,
            lr_patience=config.predictor.lr_patience, seed=config.seed,
            dtype=config.dtype)
        e2e.fit(images_tr, y_tr, images_va, y_va, train_index_list=over_local)
        bundle.end_to_end = e2e

    check_stage_disjointness(bundle)
    bundle.provenance["stage_parameter_sets_disjoint"] = True
    return bundle


def infer(bundle: ModelBundle, images, mask_override=None,
          concept_overrides=None) -> dict:
    """Full-chain inference exposing every intermediate.

    ``mask_override``: (N, H, W, n) probability maps substituted for the
    observer output (both bottleneck interventions come through here).
    ``concept_overrides``: {concept_index: value or (N,) array} applied to
    the predicted concepts before the classifier.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    out = {"variant": bundle.variant}

    if bundle.variant == "end-to-end":
        probs = bundle.end_to_end.predict_proba(images)
        out.update(class_probs=probs, prediction=np.argmax(probs, axis=1))
        return out

    stack = None
    if bundle.has("observer"):
        if mask_override is not None:
            seg = np.asarray(mask_override, dtype=np.float64)
            source = "user"
        else:
            seg = bundle.observer.predict_proba(images)
            source = PREDICTED
        out["segmentation"] = seg
        stack = soft_mask(seg, images, source=source)
        out["masked_stack"] = stack
    elif mask_override is not None:
        raise ValueError(f"variant {bundle.variant!r} has no segmentation stage")

    if bundle.has("stack_classifier"):
        probs = bundle.stack_classifier.predict_proba(stack)
        out.update(class_probs=probs, prediction=np.argmax(probs, axis=1))
        return out

    if bundle.has("conceiver"):
        conc_in = stack if stack is not None else images
        c_hat = bundle.conceiver.predict(conc_in)
        out["concepts_raw"] = c_hat.copy()
        if concept_overrides:
            c_hat = c_hat.copy()
            for idx, val in concept_overrides.items():
                c_hat[:, int(idx)] = val
        out["concepts"] = c_hat

    if bundle.has("classifier"):
        full = bundle.classifier.forward_full(out["concepts"])
        out.update(omega=full["omega"], cbar=full["cbar"],
                   logits=full["logits"], class_probs=full["probs"],
                   prediction=np.argmax(full["probs"], axis=1))
    return out


def evaluate(bundle: ModelBundle, dataset: GeoDataset, split="test") -> dict:
    """Metrics report for one split: OA/MA/MCC, COA/RMSE, IoU as applicable."""
    idx = dataset.splits[split]
    images = dataset.images(idx)
    y = dataset.label_indices(idx)
    res = infer(bundle, images)
    report = {"variant": bundle.variant, "split": split, "n": int(len(idx))}

    cls = classification_metrics(y, res["prediction"], dataset.schema.n_classes,
                                 anatomy_class_map(dataset.schema))
    report.update({"OA": cls["OA"], "MA": cls["MA"], "MCC": cls["MCC"],
                   "per_anatomy": cls.get("per_anatomy", {})})

    if "concepts" in res:
        cm = concept_metrics(res["concepts_raw"], dataset.concept_matrix(idx),
                             dataset.applicability_matrix(idx),
                             dataset.schema.binary_indices,
                             dataset.schema.scalar_indices)
        report.update(cm)

    if "segmentation" in res:
        pred_masks = np.argmax(res["segmentation"], axis=-1)
        per = iou_per_class(pred_masks, dataset.masks(idx),
                            dataset.schema.n_segmentation)
        fg = per[1:]
        report["IoU_per_class"] = [None if np.isnan(v) else float(v) for v in per]
        report["IoU_foreground_mean"] = float(np.nanmean(fg))
    return report


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_EST_CLASSES = {
    "observer": SegmentationObserver,
    "conceiver": ConceptConceiver,
    "classifier": InteractionClassifier,
    "stack_classifier": EncoderClassifier,
    "end_to_end": EndToEndClassifier,
}

_FITTED_ATTRS = ("n_classes_", "n_concepts_", "n_features_", "class_weights_",
                 "net_in_channels_")


def save_bundle(bundle: ModelBundle, path) -> None:
    tensors = {}
    stage_meta = {}
    for sname, est in bundle.stages().items():
        for tname, arr in est.net_.state_arrays().items():
            tensors[f"{sname}/{tname}"] = arr
        fitted = {attr: _jsonable(getattr(est, attr))
                  for attr in _FITTED_ATTRS if hasattr(est, attr)}
        stage_meta[sname] = {"params": _jsonable(est.get_params()),
                             "fitted": fitted}
    meta = {
        "kind": "stagedcbm-bundle",
        "variant": bundle.variant,
        "config": bundle.config.to_dict(),
        "config_fingerprint": bundle.config.fingerprint(),
        "schema_text": bundle.schema_text,
        "schema_name": bundle.schema.name,
        "stages": stage_meta,
        "provenance": bundle.provenance,
    }
    save_tensors(path, tensors, meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def load_bundle(path, expect_variant=None) -> ModelBundle:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "stagedcbm-bundle":
        raise CheckpointError(f"{path}: not a model bundle")
    if expect_variant and meta["variant"] != expect_variant:
        raise CheckpointError(
            f"{path}: holds variant {meta['variant']!r}, expected {expect_variant!r}")
    schema = _schema_from_text(meta["schema_text"], meta["schema_name"])
    config = ExperimentConfig.from_dict(meta["config"])
    bundle = ModelBundle(variant=meta["variant"], schema=schema,
                         schema_text=meta["schema_text"], config=config,
                         provenance=meta.get("provenance", {}))

    for sname, sm in meta["stages"].items():
        cls = _EST_CLASSES[sname]
        params = sm["params"]
        for k, v in list(params.items()):
            if isinstance(v, list):
                params[k] = tuple(v)
        est = cls(**params)
        for attr, v in sm["fitted"].items():
            setattr(est, attr, np.asarray(v) if attr == "class_weights_" else v)
        est.net_ = _rebuild_net(sname, est, schema, config)
        state = {tname[len(sname) + 1:]: arr for tname, arr in tensors.items()
                 if tname.startswith(sname + "/")}
        est.net_.load_state_arrays(state)
        est.net_.train(False)
        setattr(bundle, sname, est)
    return bundle


def _schema_from_text(text, name):
    import tempfile
    if not text:
        from importlib import resources
        res = resources.files("stagedcbm") / "schemas" / f"{name}.yaml"
        return load_schema_with_text(str(res))
    with tempfile.NamedTemporaryFile("w", suffix=".yaml", delete=False) as fh:
        fh.write(text)
        tmp = fh.name
    schema = load_schema(tmp)
    object.__setattr__(schema, "_source_text", text)
    return schema


def load_schema_with_text(path) -> ConceptSchema:
    schema = load_schema(path)
    object.__setattr__(schema, "_source_text", Path(path).read_text())
    return schema


def _rebuild_net(sname, est, schema: ConceptSchema, config: ExperimentConfig):
    ad.DEFAULT_DTYPE = np.float32 if est.dtype == "float32" else np.float64
    rng = np.random.default_rng(0)
    if sname == "observer":
        from .observer import ObserverNet
        return ObserverNet(rng, est.net_in_channels_, est.n_classes_,
                           tuple(est.widths))
    if sname == "conceiver":
        return EncoderNet(rng, est.net_in_channels_, est.n_concepts_,
                          tuple(est.widths))
    if sname == "classifier":
        from .interaction import _JointModule
        return _JointModule(rng, est.n_features_,
                            np.asarray(est.binary_indices, dtype=int),
                            est.n_classes_, est.hidden, est.eps_width,
                            est.use_interaction)
    if sname == "stack_classifier":
        return EncoderNet(rng, est.net_in_channels_, est.n_classes_,
                          tuple(est.widths))
    if sname == "end_to_end":
        return EndToEndNet(rng, est.net_in_channels_, est.n_seg,
                           est.concept_dim, est.n_classes_,
                           tuple(est.observer_widths), tuple(est.conceiver_widths),
                           est.hidden)
    raise CheckpointError(f"unknown stage {sname}")
