########################################################################################################
# GeneOH - generalizable hand-object interaction denoising
########################################################################################################

print('\nGeneOH API demo\n')

import os, sys
import numpy as np
np.set_printoptions(precision=4, suppress=True, linewidth=200)

current_path = os.path.dirname(os.path.abspath(__file__))
sys.path.append(f'{current_path}/geneoh_pip_package/src')

########################################################################################################
# set these before import geneoh
os.environ['GENEOH_JIT_ON'] = '0' # '1' to script the denoiser network with TorchScript
os.environ['GENEOH_LOG'] = 'INFO'

from geneoh.hoi_scene import SceneConfig, generate_synthetic_sequence, perturb_gaussian, perturb_beta
from geneoh.representation import extract_generalized_contact_points, compute_representation
from geneoh.diffusion import TrainConfig
from geneoh.pipeline import StageConfig, train_bundle, denoise_sequence
from geneoh.metrics import evaluate_sequence

# small corpus so the demo finishes on a laptop CPU, use ~500 clips and the default TrainConfig for real runs
clean = [generate_synthetic_sequence(SceneConfig(num_frames=20, object_kind=k), seed=i)
         for i, k in enumerate(['sphere', 'box', 'cylinder', 'torus'] * 4)]
print(f'{len(clean)} clean clips, {clean[0].num_frames} frames each')

contacts = extract_generalized_contact_points(clean[0])
rep = compute_representation(clean[0].keypoints, contacts)
print('J_bar', tuple(rep.J_bar.shape), 'S', tuple(rep.S.shape), 'T', tuple(rep.T.shape))

cfg = StageConfig(n_points=64)
bundle, losses = train_bundle(clean, cfg, TrainConfig(steps=500, hidden=128, n_blocks=2), verbose=True)
for name, curve in losses.items():
    print(f'{name} loss {np.mean(curve[:50]):.4f} -> {np.mean(curve[-50:]):.4f}')

# stds (0.01 m, 0.1 rad, 0.5 rad), or perturb_beta for the heavier B(8, 2) noise
noisy = perturb_gaussian(clean[0], seed=1)
# noisy = perturb_beta(clean[0], seed=1)

result = denoise_sequence(noisy, bundle, cfg, seed=0, verbose=True)
for i, J in enumerate(result.stages):
    print(f'stage {i + 1} mean keypoint error {(J - clean[0].keypoints).norm(dim=-1).mean().item() * 1e3:.2f} mm')

before = evaluate_sequence(noisy, clean[0]).to_dict()
after = evaluate_sequence(noisy.with_keypoints(result.keypoints, result.params), clean[0]).to_dict()
for key in ('mpjpe', 'iv', 'penetration_depth', 'motion_consistency', 'c_iou'):
    print(f'{key:20s} {before[key]:10.4f} -> {after[key]:10.4f} {after["units"][key]}')

print('\n')
