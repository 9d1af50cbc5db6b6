"""Published reference scores for the four backbone configurations.

Percentages as printed, per class (benign, malignant, normal). Used by the
``report --reference`` path and by the metric-arithmetic tests.
"""
from __future__ import annotations

from .dataset import ClassLabel
from .evaluation import ClassScores, report_from_scores

# backbone -> class -> (precision %, recall %, f1 %)
CLASS_SCORES = {
    "vgg19": {"benign": (74.74, 81.61, 78.02), "malignant": (60.00, 61.36, 60.67), "normal": (68.75, 44.00, 53.66)},
    "vgg16": {"benign": (74.49, 83.91, 78.92), "malignant": (72.50, 65.91, 69.05), "normal": (72.22, 52.00, 60.47)},
    "resnet50": {"benign": (69.73, 87.36, 77.51), "malignant": (84.61, 25.00, 38.60), "normal": (61.77, 84.00, 71.19)},
    "densenet121": {"benign": (74.74, 81.61, 78.02), "malignant": (62.75, 72.73, 67.37), "normal": (80.00, 32.00, 45.70)},
}

# backbone -> (SD of F1, SD of precision, SD of recall)
CLASS_SD = {
    "vgg19": (0.1254, 0.0741, 0.1882),
    "vgg16": (0.0923, 0.0124, 0.1600),
    "resnet50": (0.2088, 0.1160, 0.3507),
    "densenet121": (0.1647, 0.0884, 0.2645),
}

# test-set class sizes implied by the recall fractions
TEST_SUPPORT = {"benign": 87, "malignant": 44, "normal": 25}

WEIGHTED_VGG16 = {"precision": 73.57, "recall": 73.72, "f1": 73.18}
ACCURACY_VGG16 = 73.72

# preprocessing -> (test BCE, test Dice x 100)
SEGMENTATION = {"slic": (0.2149, 63.4), "kmeanspp": (0.2547, 57.31), "none": (0.2595, 60.67)}

DATASET_COUNTS = {"benign": 487, "malignant": 210, "normal": 177}


def reference_report(backbone: str):
    """EvaluationReport rebuilt from the published per-class percentages and derived supports."""
    scores = {}
    for label in ClassLabel:
        p, r, f = CLASS_SCORES[backbone][label.dirname]
        scores[label] = ClassScores(p / 100, r / 100, f / 100, support=TEST_SUPPORT[label.dirname])
    total = sum(TEST_SUPPORT.values())
    # accuracy equals support-weighted recall
    accuracy = sum(scores[c].recall * scores[c].support for c in ClassLabel) / total
    rep = report_from_scores(scores, accuracy, name=backbone)
    return rep
