import os, json, statistics
import pytest
import torch

from geneoh.utils import ConfigError, InvalidInputError, ShapeError
from geneoh.hoi_scene import HandSkeleton, hand_surface_from_keypoints
from geneoh.metrics import penetration_metrics, evaluate_sequence
from geneoh.pipeline import load_bundle
from geneoh.cli import (main, build_config, PerturbConfig, DenoiseRunConfig, sequence_to_dict, sequence_from_dict,
                        save_sequence, load_sequence, load_manifest, keypoints_to_binary, save_keypoints_binary,
                        load_keypoints_binary)

@pytest.fixture
def corpus(tmp_path):
    out = tmp_path / 'corpus'
    assert main(['gen-data', '--out', str(out), '--n', '2', '--num-frames', '6', '--seed', '1']) == 0
    return out

def test_gen_data_writes_manifest(corpus):
    m = load_manifest(corpus)
    assert m['command'] == 'gen-data'
    assert [c['file'] for c in m['clips']] == ['clip_00000.json', 'clip_00001.json']
    assert [c['object'] for c in m['clips']] == ['sphere', 'box']
    seq = load_sequence(corpus / 'clip_00000.json')
    assert seq.num_frames == 6 and seq.hand_params is not None

def test_gen_data_is_deterministic(corpus, tmp_path):
    other = tmp_path / 'again'
    assert main(['gen-data', '--out', str(other), '--n', '2', '--num-frames', '6', '--seed', '1']) == 0
    for name in ('clip_00000.json', 'clip_00001.json'):
        assert (corpus / name).read_text() == (other / name).read_text()

def test_perturb_defaults_and_zero_noise(corpus, tmp_path):
    assert PerturbConfig().scales == (0.01, 0.1, 0.5)
    assert PerturbConfig(mode='beta').scales == (0.01, 0.05, 0.3)
    out = tmp_path / 'quiet'
    assert main(['perturb', '--input', str(corpus), '--out', str(out), '--scales', '0,0,0']) == 0
    clean = load_sequence(corpus / 'clip_00001.json')
    same = load_sequence(out / 'clip_00001.json')
    assert torch.equal(clean.keypoints, same.keypoints)
    noisy_dir = tmp_path / 'noisy'
    assert main(['perturb', '--input', str(corpus), '--out', str(noisy_dir), '--mode', 'beta']) == 0
    noisy = load_sequence(noisy_dir / 'clip_00001.json')
    assert not torch.equal(clean.keypoints, noisy.keypoints)
    assert load_manifest(noisy_dir)['clips'][1]['clean'].endswith('clip_00001.json')

def test_unknown_config_key_exits_with_usage_error(corpus, tmp_path):
    cfg = tmp_path / 'cfg.json'
    cfg.write_text(json.dumps({'input': str(corpus), 'bogus': 1}))
    assert main(['perturb', '--config', str(cfg), '--out', str(tmp_path / 'x')]) == 2
    with pytest.raises(ConfigError):
        build_config(PerturbConfig, str(cfg))

def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / 'cfg.json'
    cfg.write_text(json.dumps({'t_m': 10, 't_s': 5}))
    run = build_config(DenoiseRunConfig, str(cfg), {'t_s': 7, 'seed': None})
    assert (run.t_m, run.t_s, run.t_t) == (10, 7, 100)
    assert run.stage_config().t_s == 7

def test_invalid_values_exit_with_usage_error(corpus, tmp_path):
    assert main(['denoise', '--input', str(corpus), '--t-m', '5000']) == 2
    assert main(['perturb', '--input', str(tmp_path / 'missing'), '--out', str(tmp_path / 'y')]) == 2

def test_eval_against_itself(corpus, tmp_path):
    out = tmp_path / 'metrics.json'
    assert main(['eval', '--input', str(corpus), '--gt', str(corpus), '--out', str(out)]) == 0
    table = json.loads(out.read_text())
    assert len(table['rows']) == 2
    for row in table['rows']:
        assert row['mpjpe'] == 0.0 and row['c_iou'] == 100.0
    assert table['summary']['mpjpe']['count'] == 2

def test_train_then_denoise(corpus, tmp_path):
    models, out = tmp_path / 'models', tmp_path / 'denoised'
    assert main(['train', '--input', str(corpus), '--out', str(models), '--steps', '2', '--batch-size', '8',
                 '--hidden', '16', '--n-blocks', '1', '--n-augment', '0', '--rows-per-clip', '20',
                 '--n-points', '16']) == 0
    assert len(json.loads((models / 'losses.json').read_text())['motion']) == 2
    assert main(['denoise', '--input', str(corpus), '--models', str(models), '--out', str(out),
                 '--t-m', '5', '--t-s', '5', '--t-t', '5', '--temporal-iters', '2', '--fit-iters', '2',
                 '--n-points', '16', '--num-samples', '2', '--select', 'all']) == 0
    files = [c['file'] for c in load_manifest(str(out))['clips']]
    assert files == ['clip_00000.s000.json', 'clip_00000.s001.json', 'clip_00001.s000.json', 'clip_00001.s001.json']
    snap = json.loads((out / 'clip_00000.s000.stages.json').read_text())
    assert {'stage1', 'stage2', 'stage3'} <= set(snap)
    assert load_sequence(str(out / files[0])).num_frames == 6
    assert main(['denoise', '--input', str(corpus), '--models', str(tmp_path / 'none'), '--out', str(out)]) == 3

def test_export_obj_frames(corpus, tmp_path):
    out = tmp_path / 'frames'
    assert main(['export', '--input', str(corpus / 'clip_00000.json'), '--out', str(out)]) == 0
    seq = load_sequence(corpus / 'clip_00000.json')
    files = sorted(os.listdir(out))
    assert len(files) == 6
    n_hand = hand_surface_from_keypoints(HandSkeleton(), seq.keypoints[:1])[0].shape[1]
    lines = (out / files[0]).read_text().splitlines()
    assert len(lines) == n_hand + len(seq.obj.samples)
    assert all(l.startswith('v ') for l in lines)

def test_export_binary_keypoints(corpus, tmp_path):
    out = tmp_path / 'kp.bin'
    assert main(['export', '--input', str(corpus / 'clip_00000.json'), '--out', str(out), '--format', 'bin']) == 0
    seq = load_sequence(corpus / 'clip_00000.json')
    J = load_keypoints_binary(out)
    assert J.shape == (6, 21, 3)
    assert torch.allclose(J, seq.keypoints, atol=1e-6)

def test_binary_layout(tmp_path):
    J = torch.arange(6, dtype=torch.float64).reshape(1, 2, 3)
    data = keypoints_to_binary(J)
    assert data[:4] == b'GOHK'
    assert len(data) == 4 + 4 + 3 * 4 + 6 * 4
    path = tmp_path / 'bad.bin'
    path.write_bytes(data[:-4])
    with pytest.raises(ShapeError):
        load_keypoints_binary(path)
    save_keypoints_binary(tmp_path / 'ok.bin', J)
    assert torch.equal(load_keypoints_binary(tmp_path / 'ok.bin'), J)

def test_sequence_json_round_trip(clean_seq, tmp_path):
    back = sequence_from_dict(json.loads(json.dumps(sequence_to_dict(clean_seq))))
    assert torch.equal(back.keypoints, clean_seq.keypoints)
    assert torch.equal(back.hand_params.pose, clean_seq.hand_params.pose)
    assert torch.allclose(back.poses.quat, clean_seq.poses.quat, atol=1e-15)
    assert back.obj.kind == clean_seq.obj.kind and len(back.obj.samples) == len(clean_seq.obj.samples)
    save_sequence(tmp_path / 's.json', clean_seq)
    assert torch.equal(load_sequence(tmp_path / 's.json').keypoints, clean_seq.keypoints)

def test_malformed_sequence():
    with pytest.raises(InvalidInputError):
        sequence_from_dict({'version': 1, 'K': 2})
    with pytest.raises(InvalidInputError):
        sequence_from_dict({'version': 7})

def test_truncated_clip_exits_with_input_error(corpus, tmp_path):
    path = corpus / 'clip_00001.json'
    text = path.read_text()
    path.write_text(text[:len(text) // 2])
    assert main(['eval', '--input', str(corpus), '--out', str(tmp_path / 'm.json')]) == 2
    assert main(['export', '--input', str(path), '--out', str(tmp_path / 'e')]) == 2
    with pytest.raises(InvalidInputError):
        load_sequence(path)

def test_non_object_documents_are_rejected(corpus, tmp_path):
    (corpus / 'clip_00000.json').write_text('[1, 2, 3]')
    assert main(['perturb', '--input', str(corpus), '--out', str(tmp_path / 'n')]) == 2
    with pytest.raises(InvalidInputError):
        sequence_from_dict([1, 2, 3])
    with pytest.raises(InvalidInputError):
        sequence_from_dict({'version': 1, 'K': 2, 'keypoints': [[[0.0] * 3] * 21] * 2, 'object': 'sphere'})

def test_corrupt_manifest_exits_with_input_error(corpus, tmp_path):
    (corpus / 'manifest.json').write_text('{"version": 1, "clips": [')
    assert main(['perturb', '--input', str(corpus), '--out', str(tmp_path / 'a')]) == 2
    (corpus / 'manifest.json').write_text(json.dumps({'version': 1, 'clips': 'clip_00000.json'}))
    with pytest.raises(InvalidInputError):
        load_manifest(corpus)

def test_generated_clips_do_not_penetrate(tmp_path):
    out = tmp_path / 'mixed'
    assert main(['gen-data', '--out', str(out), '--n', '8', '--num-frames', '8', '--seed', '4']) == 0
    for entry in load_manifest(out)['clips']:
        _, depth = penetration_metrics(load_sequence(out / entry['file']))
        assert depth < 0.1, entry

def test_eval_summary_matches_rows(corpus, tmp_path):
    noisy, out = tmp_path / 'noisy', tmp_path / 'metrics.json'
    assert main(['perturb', '--input', str(corpus), '--out', str(noisy), '--seed', '2']) == 0
    assert main(['eval', '--input', str(noisy), '--out', str(out)]) == 0
    table = json.loads(out.read_text())
    for name in ('mpjpe', 'penetration_depth', 'motion_consistency', 'proximity_error'):
        values = [row[name] for row in table['rows']]
        stats = table['summary'][name]
        assert stats['median'] == pytest.approx(statistics.median(values), abs=1e-12)
        assert stats['mean'] == pytest.approx(statistics.fmean(values), abs=1e-12)
        assert stats['std'] == pytest.approx(statistics.pstdev(values), abs=1e-9)
        assert stats['count'] == len(values)
    assert all(row['mpjpe'] > 0 for row in table['rows'])

def test_exported_keypoints_keep_metrics(corpus, tmp_path):
    path = corpus / 'clip_00001.json'
    out = tmp_path / 'kp.bin'
    assert main(['export', '--input', str(path), '--out', str(out), '--format', 'bin']) == 0
    seq = load_sequence(path)
    back = seq.with_keypoints(load_keypoints_binary(out))
    before = evaluate_sequence(seq, seq).to_dict()
    after = evaluate_sequence(back, seq).to_dict()
    for name, value in before.items():
        if name != 'units':
            assert after[name] == pytest.approx(value, abs=1e-4), name

TINY_TRAIN = ['--steps', '3', '--batch-size', '8', '--hidden', '16', '--n-blocks', '1', '--rows-per-clip', '20',
              '--n-points', '16']

def test_autoencoders_train_and_replace_diffusion(corpus, tmp_path):
    models, out = tmp_path / 'models', tmp_path / 'denoised'
    assert main(['train', '--input', str(corpus), '--out', str(models), '--autoencoders', 'true'] + TINY_TRAIN) == 0
    assert (models / 'motion.ae.gohd').exists() and (models / 'temporal.ae.gohd').exists()
    assert set(json.loads((models / 'losses.json').read_text())) >= {'motion_ae', 'spatial_ae', 'temporal_ae'}
    assert main(['denoise', '--input', str(corpus), '--models', str(models), '--out', str(out), '--use-diffusion', 'false',
                 '--temporal-iters', '2', '--fit-iters', '2', '--n-points', '16']) == 0
    assert load_manifest(str(out))['config']['use_diffusion'] is False
    assert len(load_manifest(str(out))['clips']) == 2

def test_denoise_without_autoencoders_exits_with_input_error(corpus, tmp_path):
    models = tmp_path / 'models'
    assert main(['train', '--input', str(corpus), '--out', str(models)] + TINY_TRAIN) == 0
    assert not (models / 'motion.ae.gohd').exists()
    assert main(['denoise', '--input', str(corpus), '--models', str(models), '--out', str(tmp_path / 'd'),
                 '--use-diffusion', 'false', '--n-points', '16']) == 2

def test_augment_flag_changes_losses_not_models(corpus, tmp_path):
    curves, configs = {}, {}
    for flag in ('true', 'false'):
        models = tmp_path / f'models_{flag}'
        assert main(['train', '--input', str(corpus), '--out', str(models), '--augment', flag, '--n-augment', '1']
                    + TINY_TRAIN) == 0
        curves[flag] = json.loads((models / 'losses.json').read_text())
        bundle = load_bundle(str(models))
        configs[flag] = [m.config for m in (bundle.model_J, bundle.model_S, bundle.model_T)]
    assert curves['true'] != curves['false']
    assert configs['true'] == configs['false']
    assert {k: len(v) for k, v in curves['true'].items()} == {k: len(v) for k, v in curves['false'].items()}

@pytest.mark.slow
def test_training_halves_every_loss(tmp_path):
    data, models = tmp_path / 'data', tmp_path / 'models'
    assert main(['gen-data', '--out', str(data), '--n', '4', '--num-frames', '8', '--seed', '2']) == 0
    assert main(['train', '--input', str(data), '--out', str(models), '--steps', '600', '--batch-size', '64',
                 '--hidden', '64', '--n-blocks', '2', '--lr', '0.002', '--rows-per-clip', '256', '--n-points', '32']) == 0
    for name, curve in json.loads((models / 'losses.json').read_text()).items():
        assert statistics.fmean(curve[-50:]) < 0.5 * curve[0], name
