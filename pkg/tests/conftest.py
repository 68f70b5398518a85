"""Session fixtures: the default synthetic dataset and a teacher buffer.

Built once per session; several suites (teachers, distiller, eval,
acceptance) share them.
"""

import numpy as np
import pytest

from csidistill import seeding
from csidistill.data import MultipathConfig, PreprocessConfig, preprocess, split, synth_csi
from csidistill.models import ModelSpec
from csidistill.trajectories import TeacherConfig, train_teacher

DATASET_SEED = 1234
SPLIT_SEED = 99
TEACHER_ROOT = 4242
TEACHER_COUNT = 5


@pytest.fixture(scope="session")
def csi_splits():
    """(train, test) preprocessed with train-split statistics."""
    full = synth_csi(MultipathConfig(), 150, seed=DATASET_SEED)
    train, test = split(full, 100 / 150, seed=SPLIT_SEED)
    pp = PreprocessConfig()
    return preprocess(train, pp, train), preprocess(test, pp, train)


@pytest.fixture(scope="session")
def mlp_spec6(csi_splits):
    train, _ = csi_splits
    return ModelSpec("mlp", train.manifest.sample_shape, train.manifest.class_count)


@pytest.fixture(scope="session")
def teacher_buffer(csi_splits, mlp_spec6):
    train, _ = csi_splits
    buffer = []
    for i in range(TEACHER_COUNT):
        cfg = TeacherConfig(spec=mlp_spec6, seed=seeding.derive(TEACHER_ROOT, "teacher", i))
        buffer.append(train_teacher(train, cfg))
    return buffer
