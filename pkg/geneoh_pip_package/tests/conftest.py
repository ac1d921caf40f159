import os, sys
current_path = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, f'{current_path}/../src')

import pytest
import torch

torch.set_default_dtype(torch.float64)

from geneoh.hoi_scene import SceneConfig, generate_synthetic_sequence

@pytest.fixture(scope='session')
def clean_seq():
    return generate_synthetic_sequence(SceneConfig(num_frames=12, n_object_samples=1024), seed=3)

@pytest.fixture(scope='session')
def box_seq():
    return generate_synthetic_sequence(SceneConfig(num_frames=10, object_kind='box', n_object_samples=1024), seed=5)
