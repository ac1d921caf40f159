########################################################################################################
# GeneOH - generalizable hand-object interaction denoising
########################################################################################################

import os, sys, json, struct, argparse, logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, asdict
from typing import Optional, Tuple
import numpy as np
import torch

from .utils import (DTYPE, GeneOHError, ConfigError, InvalidInputError, ShapeError, UnsupportedInputError,
                    atomic_write_bytes, atomic_write_text)
from .hoi_scene import (OBJECT_KINDS, HandSkeleton, HandParams, ObjectPose, HOISequence, SceneConfig, make_object,
                        generate_synthetic_sequence, perturb_gaussian, perturb_beta, hand_surface_from_keypoints)
from .diffusion import TrainConfig
from .pipeline import StageConfig, train_bundle, save_bundle, load_bundle, denoise_samples
from .metrics import evaluate_sequence, summarize_reports

log = logging.getLogger('geneoh.cli')

FORMAT_VERSION = 1
MANIFEST = 'manifest.json'

########################################################################################################
# sequence files

def sequence_to_dict(seq):
    out = {'version': FORMAT_VERSION, 'K': seq.num_frames, 'keypoints': seq.keypoints.tolist()}
    if seq.hand_params is not None:
        p = seq.hand_params
        out['hand_params'] = [{'root_rot': p.root_rot[k].tolist(), 'root_trans': p.root_trans[k].tolist(),
                               'pose': p.pose[k].reshape(-1).tolist(), 'shape': p.shape[k].tolist()}
                              for k in range(seq.num_frames)]
    out['object'] = {'kind': seq.obj.kind, 'dims': list(seq.obj.dims), 'n_samples': seq.obj.n_requested or len(seq.obj.samples),
                     'poses': [{'quat': seq.poses.quat[k].tolist(), 'trans': seq.poses.trans[k].tolist()}
                               for k in range(seq.num_frames)]}
    return out

def _read_json(path, what):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            doc = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise InvalidInputError(f'{path}: corrupt {what}: {e}') from e
    if not isinstance(doc, dict):
        raise InvalidInputError(f'{path}: {what} must be a JSON object')
    return doc

def sequence_from_dict(d):
    if not isinstance(d, dict):
        raise InvalidInputError('a sequence must be a JSON object')
    try:
        if d.get('version') != FORMAT_VERSION:
            raise InvalidInputError(f'unsupported sequence version {d.get("version")}')
        J = torch.tensor(d['keypoints'], dtype=DTYPE)
        if J.dim() != 3 or J.shape[0] != d['K']:
            raise ShapeError('keypoints do not match K')
        o = d['object']
        obj = make_object(o['kind'], o['dims'], o.get('n_samples', 2048))
        poses = ObjectPose(torch.tensor([p['quat'] for p in o['poses']], dtype=DTYPE),
                           torch.tensor([p['trans'] for p in o['poses']], dtype=DTYPE))
        params = None
        if d.get('hand_params'):
            hp = d['hand_params']
            params = HandParams(torch.tensor([p['root_rot'] for p in hp], dtype=DTYPE),
                                torch.tensor([p['root_trans'] for p in hp], dtype=DTYPE),
                                torch.tensor([p['pose'] for p in hp], dtype=DTYPE).reshape(len(hp), 15, 3),
                                torch.tensor([p['shape'] for p in hp], dtype=DTYPE))
    except (KeyError, TypeError, ValueError, AttributeError, IndexError) as e:
        if isinstance(e, GeneOHError):
            raise
        raise InvalidInputError(f'malformed sequence: {e}') from e
    return HOISequence(J, obj, poses, params).validate()

def save_sequence(path, seq):
    atomic_write_text(path, json.dumps(sequence_to_dict(seq)))

def load_sequence(path):
    return sequence_from_dict(_read_json(path, 'sequence'))

def save_manifest(folder, command, clips, extra=None):
    body = {'version': FORMAT_VERSION, 'command': command, 'clips': clips}
    body.update(extra or {})
    atomic_write_text(os.path.join(folder, MANIFEST), json.dumps(body, indent=1))

def load_manifest(folder):
    path = os.path.join(folder, MANIFEST)
    if not os.path.exists(path):
        raise InvalidInputError(f'no {MANIFEST} in {folder}')
    m = _read_json(path, 'manifest')
    clips = m.get('clips')
    if not isinstance(clips, list) or not all(isinstance(c, dict) and isinstance(c.get('file'), str) for c in clips):
        raise InvalidInputError(f'{path}: clips must be a list of entries with a file name')
    return m

########################################################################################################
# flat binary keypoints: 'GOHK', rank u32, dims u32 x rank, f32 little-endian payload

KEYPOINT_MAGIC = b'GOHK'

def keypoints_to_binary(J):
    arr = np.ascontiguousarray(J.detach().cpu().numpy().astype('<f4'))
    return KEYPOINT_MAGIC + struct.pack('<I', arr.ndim) + struct.pack('<' + 'I' * arr.ndim, *arr.shape) + arr.tobytes()

def save_keypoints_binary(path, J):
    atomic_write_bytes(path, keypoints_to_binary(J))

def load_keypoints_binary(path):
    with open(path, 'rb') as f:
        data = f.read()
    if data[:4] != KEYPOINT_MAGIC:
        raise InvalidInputError(f'{path} is not a keypoint file')
    rank, = struct.unpack_from('<I', data, 4)
    shape = struct.unpack_from('<' + 'I' * rank, data, 8)
    start = 8 + 4 * rank
    if len(data) - start != 4 * int(np.prod(shape)):
        raise ShapeError('keypoint payload does not match the declared shape')
    return torch.tensor(np.frombuffer(data, dtype='<f4', offset=start).reshape(shape).astype(np.float64))

def sequence_to_obj_frames(seq, skeleton=None, density=500.0):
    '''One OBJ text per frame: hand surface vertices followed by posed object samples.'''
    surf, _ = hand_surface_from_keypoints(skeleton or HandSkeleton(), seq.keypoints, density)
    obj, _ = seq.object_points()
    out = []
    for k in range(seq.num_frames):
        verts = torch.cat([surf[k], obj[k]]).tolist()
        out.append(''.join(f'v {x:.6f} {y:.6f} {z:.6f}\n' for x, y, z in verts))
    return out

########################################################################################################
# run configs: flags > file > defaults

@dataclass
class GenDataConfig:
    out: str = 'corpus'
    n: int = 10
    seed: int = 0
    num_frames: int = 30
    object_kind: str = 'mixed'
    motion_amplitude: float = 0.01
    jobs: int = 1

    def __post_init__(self):
        if self.n <= 0 or self.num_frames < 2 or self.jobs <= 0:
            raise ConfigError('n and jobs must be positive and num_frames >= 2')
        if self.object_kind != 'mixed' and self.object_kind not in OBJECT_KINDS:
            raise ConfigError(f'unknown object kind {self.object_kind!r}')

@dataclass
class PerturbConfig:
    input: str = 'corpus'
    out: str = 'noisy'
    mode: str = 'gaussian'
    scales: Optional[Tuple[float, float, float]] = None
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.mode not in ('gaussian', 'beta'):
            raise ConfigError(f'unknown noise mode {self.mode!r}')
        if self.scales is None:
            self.scales = (0.01, 0.1, 0.5) if self.mode == 'gaussian' else (0.01, 0.05, 0.3)
        self.scales = tuple(float(s) for s in self.scales)
        if len(self.scales) != 3 or min(self.scales) < 0:
            raise ConfigError('scales must be three non-negative numbers')
        if self.jobs <= 0:
            raise ConfigError('jobs must be positive')

@dataclass
class TrainRunConfig:
    input: str = 'corpus'
    out: str = 'models'
    seed: int = 0
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    hidden: int = 256
    n_blocks: int = 4
    augment: bool = True
    n_augment: int = 1
    rows_per_clip: int = 2048
    n_points: int = 128
    autoencoders: bool = False

    def __post_init__(self):
        if self.n_augment < 0 or self.rows_per_clip <= 0 or self.n_points <= 0:
            raise ConfigError('invalid augmentation or row settings')
        TrainConfig(self.batch_size, self.steps, self.lr, self.seed, self.hidden, self.n_blocks)

@dataclass
class DenoiseRunConfig:
    input: str = 'noisy'
    models: str = 'models'
    out: str = 'denoised'
    seed: int = 0
    num_samples: int = 1
    select: str = 'closest'
    t_m: int = 400
    t_s: int = 200
    t_t: int = 100
    temporal_iters: int = 300
    fit_iters: int = 200
    n_points: int = 128
    use_spatial: bool = True
    use_temporal: bool = True
    whole_object_contacts: bool = False
    use_diffusion: bool = True
    jobs: int = 1

    def __post_init__(self):
        if self.num_samples <= 0 or self.jobs <= 0:
            raise ConfigError('num_samples and jobs must be positive')
        if self.select not in ('closest', 'all'):
            raise ConfigError(f'unknown selection {self.select!r}')
        self.stage_config()

    def stage_config(self):
        return StageConfig(t_m=self.t_m, t_s=self.t_s, t_t=self.t_t, temporal_iters=self.temporal_iters,
                           fit_iters=self.fit_iters, n_points=self.n_points, use_spatial=self.use_spatial,
                           use_temporal=self.use_temporal, whole_object_contacts=self.whole_object_contacts,
                           use_diffusion=self.use_diffusion)

@dataclass
class EvalConfig:
    input: str = 'denoised'
    gt: Optional[str] = None
    out: str = 'metrics.json'
    voxel: float = 0.002
    threshold: float = 0.002
    surface_contacts: bool = False
    jobs: int = 1

    def __post_init__(self):
        if not (self.voxel > 0 and self.threshold > 0 and self.jobs > 0):
            raise ConfigError('voxel, threshold and jobs must be positive')

@dataclass
class ExportConfig:
    input: str = 'clip.json'
    out: str = 'export'
    format: str = 'obj'

    def __post_init__(self):
        if self.format not in ('obj', 'bin'):
            raise ConfigError(f'unknown export format {self.format!r}')

def build_config(cls, path=None, overrides=None):
    values = {}
    if path:
        with open(path, 'r', encoding='utf-8') as f:
            try:
                values = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f'bad config file {path}: {e}') from e
        if not isinstance(values, dict):
            raise ConfigError('config file must hold a JSON object')
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f'unknown config keys {unknown}')
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e

def _pool_map(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))

def _clip_paths(folder):
    m = load_manifest(folder)
    return m, [(c, os.path.join(folder, c['file'])) for c in m['clips']]

########################################################################################################
# commands

def cmd_gen_data(cfg):
    os.makedirs(cfg.out, exist_ok=True)

    def one(i):
        kind = OBJECT_KINDS[i % len(OBJECT_KINDS)] if cfg.object_kind == 'mixed' else cfg.object_kind
        scene = SceneConfig(num_frames=cfg.num_frames, object_kind=kind, motion_amplitude=cfg.motion_amplitude)
        seed = cfg.seed * 1000003 + i
        seq = generate_synthetic_sequence(scene, seed)
        name = f'clip_{i:05d}.json'
        save_sequence(os.path.join(cfg.out, name), seq)
        return {'file': name, 'seed': seed, 'object': kind}

    clips = _pool_map(one, range(cfg.n), cfg.jobs)
    save_manifest(cfg.out, 'gen-data', clips, {'config': asdict(cfg)})
    log.info(f'wrote {len(clips)} clips to {cfg.out}')
    return clips

def cmd_perturb(cfg):
    _, items = _clip_paths(cfg.input)
    os.makedirs(cfg.out, exist_ok=True)
    op = perturb_gaussian if cfg.mode == 'gaussian' else perturb_beta

    def one(i):
        entry, path = items[i]
        noisy = op(load_sequence(path), cfg.scales, seed=cfg.seed * 1000003 + i)
        save_sequence(os.path.join(cfg.out, entry['file']), noisy)
        return {'file': entry['file'], 'clean': os.path.abspath(path), 'seed': cfg.seed * 1000003 + i}

    clips = _pool_map(one, range(len(items)), cfg.jobs)
    save_manifest(cfg.out, 'perturb', clips, {'config': asdict(cfg)})
    return clips

def cmd_train(cfg):
    _, items = _clip_paths(cfg.input)
    seqs = [load_sequence(p) for _, p in items]
    if not seqs:
        raise InvalidInputError('training corpus is empty')
    tcfg = TrainConfig(cfg.batch_size, cfg.steps, cfg.lr, cfg.seed, cfg.hidden, cfg.n_blocks)
    bundle, losses = train_bundle(seqs, StageConfig(n_points=cfg.n_points), tcfg,
                                  cfg.n_augment if cfg.augment else 0, cfg.seed, cfg.rows_per_clip,
                                  autoencoders=cfg.autoencoders)
    save_bundle(cfg.out, bundle)
    atomic_write_text(os.path.join(cfg.out, 'losses.json'), json.dumps(losses))
    return losses

def cmd_denoise(cfg):
    _, items = _clip_paths(cfg.input)
    bundle = load_bundle(cfg.models)
    stage = cfg.stage_config()
    os.makedirs(cfg.out, exist_ok=True)
    seeds = list(range(cfg.seed, cfg.seed + cfg.num_samples))

    def one(item):
        entry, path = item
        seq = load_sequence(path)
        results = denoise_samples(seq, bundle, stage, seeds, cfg.select)
        base = entry['file'][:-len('.json')]
        rows = []
        for j, res in enumerate(results):
            name = f'{base}.json' if cfg.select == 'closest' else f'{base}.s{j:03d}.json'
            save_sequence(os.path.join(cfg.out, name), seq.with_keypoints(res.keypoints, res.params))
            snap = {f'stage{i + 1}': J.tolist() for i, J in enumerate(res.stages)}
            snap['temporal_curve'] = res.diagnostics.get('temporal_curve', [])
            if 'fit' in res.diagnostics:
                snap['fit_loss'] = res.diagnostics['fit']['loss']
            atomic_write_text(os.path.join(cfg.out, name[:-len('.json')] + '.stages.json'), json.dumps(snap))
            rows.append({'file': name, 'source': entry['file'], 'clean': entry.get('clean')})
        return rows

    clips = [r for rows in _pool_map(one, items, cfg.jobs) for r in rows]
    save_manifest(cfg.out, 'denoise', clips, {'config': asdict(cfg)})
    return clips

def cmd_eval(cfg):
    _, items = _clip_paths(cfg.input)

    def one(item):
        entry, path = item
        pred = load_sequence(path)
        gt = None
        if cfg.gt:
            gt = load_sequence(os.path.join(cfg.gt, entry.get('source', entry['file'])))
        elif entry.get('clean'):
            gt = load_sequence(entry['clean'])
        report = evaluate_sequence(pred, gt, voxel=cfg.voxel, threshold=cfg.threshold, surface_contacts=cfg.surface_contacts)
        return entry['file'], report

    results = _pool_map(one, items, cfg.jobs)
    table = {'rows': [dict(file=f, **r.to_dict()) for f, r in results],
             'summary': summarize_reports([r for _, r in results])}
    atomic_write_text(cfg.out, json.dumps(table, indent=1))
    return table

def cmd_export(cfg):
    seq = load_sequence(cfg.input)
    if cfg.format == 'bin':
        save_keypoints_binary(cfg.out, seq.keypoints)
        return [cfg.out]
    os.makedirs(cfg.out, exist_ok=True)
    paths = []
    for k, text in enumerate(sequence_to_obj_frames(seq)):
        p = os.path.join(cfg.out, f'frame_{k:04d}.obj')
        atomic_write_text(p, text)
        paths.append(p)
    return paths

########################################################################################################

def _bool(s):
    if s.lower() in ('1', 'true', 'yes', 'on'):
        return True
    if s.lower() in ('0', 'false', 'no', 'off'):
        return False
    raise argparse.ArgumentTypeError(f'expected a boolean, got {s!r}')

def _floats(s):
    return tuple(float(x) for x in s.split(','))

def get_parser():
    p = argparse.ArgumentParser(prog='geneoh', description='Hand-object interaction denoising.')
    sub = p.add_subparsers(dest='command', required=True)

    def command(name, help):
        c = sub.add_parser(name, help=help, argument_default=argparse.SUPPRESS)
        c.add_argument('--config', metavar='JSON', default=None, help='JSON file of config fields.')
        c.add_argument('--seed', type=int)
        c.add_argument('--out', metavar='OUTPUT')
        return c

    c = command('gen-data', 'Write a clean synthetic corpus.')
    c.add_argument('--n', type=int, help='Number of clips.')
    c.add_argument('--num-frames', dest='num_frames', type=int)
    c.add_argument('--object-kind', dest='object_kind', choices=('mixed',) + OBJECT_KINDS)
    c.add_argument('--motion-amplitude', dest='motion_amplitude', type=float)
    c.add_argument('--jobs', type=int)

    c = command('perturb', 'Inject parameter-space noise into a corpus.')
    c.add_argument('--input', metavar='INPUT')
    c.add_argument('--mode', choices=('gaussian', 'beta'))
    c.add_argument('--scales', type=_floats, help='trans,rot,pose e.g. 0.01,0.1,0.5')
    c.add_argument('--jobs', type=int)

    c = command('train', 'Train the three denoisers.')
    c.add_argument('--input', metavar='INPUT')
    for name, typ in (('steps', int), ('batch-size', int), ('lr', float), ('hidden', int), ('n-blocks', int),
                      ('n-augment', int), ('rows-per-clip', int), ('n-points', int)):
        c.add_argument(f'--{name}', dest=name.replace('-', '_'), type=typ)
    c.add_argument('--augment', type=_bool)
    c.add_argument('--autoencoders', type=_bool, help='Also train one denoising autoencoder per stage.')

    c = command('denoise', 'Denoise a corpus with trained models.')
    c.add_argument('--input', metavar='INPUT')
    c.add_argument('--models', metavar='DIR')
    c.add_argument('--num-samples', dest='num_samples', type=int)
    c.add_argument('--select', choices=('closest', 'all'))
    for name in ('t-m', 't-s', 't-t', 'temporal-iters', 'fit-iters', 'n-points', 'jobs'):
        c.add_argument(f'--{name}', dest=name.replace('-', '_'), type=int)
    for name in ('use-spatial', 'use-temporal', 'whole-object-contacts', 'use-diffusion'):
        c.add_argument(f'--{name}', dest=name.replace('-', '_'), type=_bool)

    c = command('eval', 'Compute metrics for a corpus.')
    c.add_argument('--input', metavar='INPUT')
    c.add_argument('--gt', metavar='DIR')
    c.add_argument('--voxel', type=float)
    c.add_argument('--threshold', type=float)
    c.add_argument('--surface-contacts', dest='surface_contacts', type=_bool)
    c.add_argument('--jobs', type=int)

    c = command('export', 'Export one sequence as OBJ frames or flat binary keypoints.')
    c.add_argument('--input', metavar='INPUT')
    c.add_argument('--format', choices=('obj', 'bin'))
    return p

COMMANDS = {
    'gen-data': (GenDataConfig, cmd_gen_data),
    'perturb': (PerturbConfig, cmd_perturb),
    'train': (TrainRunConfig, cmd_train),
    'denoise': (DenoiseRunConfig, cmd_denoise),
    'eval': (EvalConfig, cmd_eval),
    'export': (ExportConfig, cmd_export),
}

def main(argv=None):
    args = vars(get_parser().parse_args(argv))
    name, path = args.pop('command'), args.pop('config')
    cls, fn = COMMANDS[name]
    if 'seed' in args and 'seed' not in {f.name for f in fields(cls)}:
        args.pop('seed')
    try:
        fn(build_config(cls, path, args))
    except (ConfigError, InvalidInputError, ShapeError, UnsupportedInputError) as e:
        log.error(f'{name}: {e}')
        return 2
    except (GeneOHError, OSError) as e:
        log.error(f'{name}: {e}')
        return 3
    return 0

if __name__ == '__main__':
    sys.exit(main())
