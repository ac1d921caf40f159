########################################################################################################
# GeneOH - generalizable hand-object interaction denoising
########################################################################################################

import os, sys, json, time, itertools
current_path = os.path.dirname(os.path.abspath(__file__))
sys.path.append(f'{current_path}/../geneoh_pip_package/src')
try:
    N_CLIPS = int(sys.argv[1])
except:
    N_CLIPS = 40
import numpy as np
np.set_printoptions(precision=4, suppress=True, linewidth=200)

########################################################################################################

os.environ['GENEOH_JIT_ON'] = '0'
os.environ['GENEOH_LOG'] = 'WARNING'

NUM_FRAMES = 30
N_TEST = 8
TRAIN = dict(steps=2000, hidden=256, n_blocks=4)
STAGES = dict(t_m=400, t_s=200, t_t=100)

########################################################################################################

print(f'\nGeneOH synthetic benchmark, {N_CLIPS} train clips, {N_TEST} test clips')
from geneoh.hoi_scene import OBJECT_KINDS, SceneConfig, generate_synthetic_sequence, perturb_gaussian, perturb_beta
from geneoh.diffusion import TrainConfig
from geneoh.pipeline import StageConfig, train_bundle, denoise_samples, denoise_sequence, trajectory_distance
from geneoh.metrics import evaluate_sequence, summarize_reports, penetration_metrics

def corpus(n, seed0):
    out = []
    for i in range(n):
        scene = SceneConfig(num_frames=NUM_FRAMES, object_kind=OBJECT_KINDS[i % len(OBJECT_KINDS)])
        out.append(generate_synthetic_sequence(scene, seed=seed0 + i))
    return out

time_ref = time.time_ns()
train_set = corpus(N_CLIPS, 0)
test_set = corpus(N_TEST, 100000)
print(f'data {(time.time_ns() - time_ref) / 1e9:.1f}s')

time_ref = time.time_ns()
cfg = StageConfig(**STAGES)
bundle, losses = train_bundle(train_set, cfg, TrainConfig(**TRAIN), autoencoders=True, verbose=True)
print(f'train {(time.time_ns() - time_ref) / 1e9:.1f}s', {k: round(float(np.mean(v[-100:])), 4) for k, v in losses.items()})

########################################################################################################

print('Denoise...')
table, checks = {}, {}
for noise_name, op in (('gaussian', perturb_gaussian), ('beta', perturb_beta)):
    noisy_reports, clean_reports = [], []
    depth_ok, diverse = 0, 0
    time_ref = time.time_ns()
    for i, gt in enumerate(test_set):
        noisy = op(gt, seed=i)
        samples = denoise_samples(noisy, bundle, cfg, seeds=(0, 1, 2), select='all')
        best = min(samples, key=lambda r: trajectory_distance(r.keypoints, noisy.keypoints))
        noisy_reports.append(evaluate_sequence(noisy, gt))
        clean_reports.append(evaluate_sequence(noisy.with_keypoints(best.keypoints, best.params), gt))
        d1 = penetration_metrics(noisy.with_keypoints(best.stages[0]))[1]
        d2 = penetration_metrics(noisy.with_keypoints(best.stages[1]))[1]
        depth_ok += d2 <= d1 + 1e-6
        gaps = [(a.keypoints - b.keypoints).norm(dim=-1).mean().item() * 1e3 for a, b in itertools.combinations(samples, 2)]
        diverse += max(gaps) > 1.0
    table[noise_name] = {'input': summarize_reports(noisy_reports), 'denoised': summarize_reports(clean_reports)}
    print(f'{noise_name} {(time.time_ns() - time_ref) / 1e9:.1f}s')
    for key in ('mpjpe', 'mpvpe', 'c_iou', 'iv', 'penetration_depth', 'motion_consistency'):
        a, b = table[noise_name]['input'][key], table[noise_name]['denoised'][key]
        print(f'  {key:20s} median {a["median"]:9.3f} -> {b["median"]:9.3f}')

    ratio = lambda key: table[noise_name]['denoised'][key]['median'] / max(table[noise_name]['input'][key]['median'], 1e-12)
    checks[noise_name] = {
        'mpjpe_ratio': ratio('mpjpe'),
        'motion_consistency_ratio': ratio('motion_consistency'),
        'spatial_depth_not_worse': depth_ok / len(test_set),
        'distinct_samples': diverse / len(test_set),
    }
    print('  checks', {k: round(v, 3) for k, v in checks[noise_name].items()})

########################################################################################################

print('Ablation: autoencoder in place of diffusion')
ae_cfg = StageConfig(use_diffusion=False, **STAGES)
ae_reports = []
for i, gt in enumerate(test_set):
    noisy = perturb_gaussian(gt, seed=i)
    res = denoise_sequence(noisy, bundle, ae_cfg)
    ae_reports.append(evaluate_sequence(noisy.with_keypoints(res.keypoints, res.params), gt))
table['gaussian_autoencoder'] = summarize_reports(ae_reports)
print(f'  mpjpe median {table["gaussian"]["denoised"]["mpjpe"]["median"]:.3f} (diffusion)'
      f' vs {table["gaussian_autoencoder"]["mpjpe"]["median"]:.3f} (autoencoder)')

with open(f'{current_path}/benchmark_result.json', 'w', encoding='utf-8') as f:
    json.dump({'metrics': table, 'checks': checks}, f, indent=1)

LIMITS = {'mpjpe_ratio': 0.6, 'motion_consistency_ratio': 0.5}
failed = [f'{noise} {key}={v[key]:.3f} > {limit}' for noise, v in checks.items() for key, limit in LIMITS.items() if v[key] > limit]
failed += [f'{noise} {key}={v[key]:.3f} < 1' for noise, v in checks.items()
           for key in ('spatial_depth_not_worse', 'distinct_samples') if v[key] < 1]
if failed:
    print('FAILED', *failed, sep='\n  ')
    sys.exit(1)
print('all checks passed')
