from __future__ import annotations

import numpy as np
import pytest

from xopd_lab.corpus import FAMILIES, SpeechCodec, build_dataset
from xopd_lab.model import (
    ModelConfig,
    TeacherModel,
    init_student_from_teacher,
)


@pytest.fixture(scope="session")
def codec() -> SpeechCodec:
    return SpeechCodec()


@pytest.fixture(scope="session")
def small_dataset(codec):
    return build_dataset({f: (60, 20, 20) for f in FAMILIES}, codec, seed=0)


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig(embed_dim=32, n_layers=2, n_heads=2, speech_embed_dim=16)


def _perturbed_teacher(cfg: ModelConfig, seed: int) -> TeacherModel:
    teacher = TeacherModel.init(cfg, seed)
    rng = np.random.default_rng([seed, 77])
    for p in teacher.params.values():
        p.data += rng.normal(0.0, 0.02, p.data.shape)
    return teacher


@pytest.fixture(scope="session")
def tiny_teacher(tiny_config):
    return _perturbed_teacher(tiny_config, 1)


@pytest.fixture(scope="session")
def tiny_student(tiny_config, tiny_teacher):
    student = init_student_from_teacher(tiny_teacher, tiny_config, 2)
    rng = np.random.default_rng(43)
    for p in student.params.values():
        p.data += rng.normal(0.0, 0.02, p.data.shape)
    return student
