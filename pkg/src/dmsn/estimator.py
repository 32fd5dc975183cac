"""scikit-learn style front end: ``DMSNDetector().fit(sources, target).predict(images)``."""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import active_branches, fuse_predictions, fusion_weights, mean_ap, predict
from .exceptions import PreconditionError
from .structures import Detection, ImageSample
from .trainer import TrainConfig, Trainer
from .validation import check_annotations, check_images, check_labelled


class _DomainTable(dict):
    """Plain ``domain id -> samples`` mapping with the attributes the trainer reads."""

    def __init__(self, data: Dict[int, List[ImageSample]], classes: List[str]):
        super().__init__(data)
        self.classes = classes


class DMSNDetector(BaseEstimator):
    """Multi-source domain-adaptive detector.

    Parameters mirror :class:`dmsn.trainer.TrainConfig`; see there for their
    meaning. ``fit`` takes one labelled image collection per source domain and
    the unlabelled target images; ``predict`` returns fused detections.

    Attributes set by ``fit``: ``trainer_``, ``detector_``, ``config_``,
    ``n_classes_``, ``classes_``, ``beta_``, ``history_``, ``image_size_``.
    """

    def __init__(
        self,
        method="dmsn",
        epochs=20,
        phase2_start_epoch=10,
        steps_per_epoch=0,
        lr=0.001,
        lambda_tradeoff=1.0,
        gamma=5.0,
        alpha_ema=0.99,
        n_proposals=256,
        lmb_capacity=100,
        grl_warmup_steps=0,
        grad_clip=0.0,
        fusion="nms",
        fusion_iou=0.5,
        beta_weighted_fusion=False,
        classes=None,
        seed=0,
    ):
        self.method = method
        self.epochs = epochs
        self.phase2_start_epoch = phase2_start_epoch
        self.steps_per_epoch = steps_per_epoch
        self.lr = lr
        self.lambda_tradeoff = lambda_tradeoff
        self.gamma = gamma
        self.alpha_ema = alpha_ema
        self.n_proposals = n_proposals
        self.lmb_capacity = lmb_capacity
        self.grl_warmup_steps = grl_warmup_steps
        self.grad_clip = grad_clip
        self.fusion = fusion
        self.fusion_iou = fusion_iou
        self.beta_weighted_fusion = beta_weighted_fusion
        self.classes = classes
        self.seed = seed

    def _make_config(self, n_sources: int) -> TrainConfig:
        return TrainConfig(
            method=self.method,
            epochs=self.epochs,
            phase2_start_epoch=self.phase2_start_epoch,
            steps_per_epoch=self.steps_per_epoch,
            lr=self.lr,
            lambda_tradeoff=self.lambda_tradeoff,
            gamma=self.gamma,
            alpha_ema=self.alpha_ema,
            n_proposals=self.n_proposals,
            lmb_capacity=self.lmb_capacity,
            grl_warmup_steps=self.grl_warmup_steps,
            grad_clip=self.grad_clip,
            fusion=self.fusion,
            fusion_iou=self.fusion_iou,
            beta_weighted_fusion=self.beta_weighted_fusion,
            seed=self.seed,
            source_domains=tuple(range(n_sources)),
            target_domain=n_sources,
            probe_every=0,
        )

    def fit(self, sources: Sequence, target, y=None, max_steps: Optional[int] = None):
        """Train on labelled ``sources`` (a sequence of image collections) and unlabelled ``target``.

        With ``method="oracle"`` the target images must carry annotations and
        the sources are ignored.
        """
        if isinstance(sources, (np.ndarray, ImageSample)) or len(sources) == 0:
            raise PreconditionError("sources must be a non-empty sequence of image collections")
        src = [check_images(s, domain_id=i) for i, s in enumerate(sources)]
        size = (src[0][0].height, src[0][0].width)
        tgt = check_images(target, image_size=size, domain_id=len(src))
        for i, s in enumerate(src):
            check_images(s, image_size=size)
            if self.method != "oracle":
                check_labelled(s, f"source {i} images")
        if self.method == "oracle":
            check_labelled(tgt, "target images")
        else:
            tgt = [s.unlabeled() for s in tgt]

        class_ids = [a.class_id for coll in src + [tgt] for s in coll for a in s.boxes]
        n_classes = len(self.classes) if self.classes is not None else 1 + max(class_ids, default=0)
        if class_ids and max(class_ids) >= n_classes:
            raise PreconditionError(f"class id {max(class_ids)} exceeds the {n_classes} declared classes")
        classes = list(self.classes) if self.classes is not None else [str(c) for c in range(n_classes)]

        config = self._make_config(len(src))
        table = _DomainTable({i: s for i, s in enumerate(src)} | {len(src): tgt}, classes)
        trainer = Trainer(config, table, num_classes=n_classes)
        end = trainer.total_steps if max_steps is None else min(trainer.total_steps, max_steps)
        history = [trainer.step() for _ in range(end)]

        self.trainer_ = trainer
        self.detector_ = trainer.model
        self.config_ = config
        self.n_classes_ = n_classes
        self.classes_ = classes
        self.beta_ = np.asarray(trainer.state.beta, dtype=np.float64)
        self.history_ = history
        self.image_size_ = size
        return self

    def _branches(self) -> List[int]:
        meta = {"state": {"pseudo_initialized": self.trainer_.state.pseudo_initialized}}
        return active_branches(self.detector_, meta)

    def predict(self, X) -> List[List[Detection]]:
        """Fused detections for each image in ``X``."""
        check_is_fitted(self)
        images = check_images(X, image_size=self.image_size_)
        branches = self._branches()
        weights = fusion_weights(self.detector_, branches, self.beta_) if self.beta_weighted_fusion else None
        fused, _ = predict(self.detector_, images, branches, self.n_proposals, self.fusion, self.fusion_iou, weights)
        return fused

    def predict_subnets(self, X) -> Dict[int, List[List[Detection]]]:
        """Standalone detections of every active branch, keyed by branch id."""
        check_is_fitted(self)
        images = check_images(X, image_size=self.image_size_)
        _, per_branch = predict(self.detector_, images, self._branches(), self.n_proposals)
        return per_branch

    def score(self, X, y=None) -> float:
        """Target mAP at IoU 0.5. ``y`` defaults to the annotations carried by ``X``."""
        check_is_fitted(self)
        images = check_images(X, image_size=self.image_size_)
        gt = [s.boxes for s in images] if y is None else check_annotations(y, len(images))
        return mean_ap(self.predict(images), gt, self.n_classes_)
