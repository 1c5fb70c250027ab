"""Linear view probe: how well a fresh logistic regression tells views apart from features."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import balanced_accuracy_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .dataset import Dataset


@torch.no_grad()
def pooled_feature_maps(encoder, dataset: Dataset, batch_size: int = 64) -> np.ndarray:
    """Backbone maps averaged over space, (N, C), with the encoder in inference mode."""
    was_training = encoder.training
    encoder.eval()
    out = []
    try:
        for start in range(0, len(dataset), batch_size):
            images = dataset.images(range(start, min(start + batch_size, len(dataset))))
            out.append(encoder.backbone_forward(images).mean(dim=(2, 3)).double().numpy())
    finally:
        encoder.train(was_training)
    return np.concatenate(out)


def pixel_means(dataset: Dataset) -> np.ndarray:
    return dataset.images().mean(dim=(2, 3)).double().numpy()


def view_probe_accuracy(train_x: np.ndarray, train_views: np.ndarray,
                        test_x: np.ndarray, test_views: np.ndarray, seed: int = 0) -> float:
    """Balanced accuracy (chance = 0.5) of a class-balanced logistic regression."""
    clf = make_pipeline(
        StandardScaler(),
        LogisticRegression(class_weight="balanced", max_iter=2000, random_state=seed),
    )
    clf.fit(train_x, train_views)
    return float(balanced_accuracy_score(test_views, clf.predict(test_x)))
