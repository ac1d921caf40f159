########################################################################################################
# GeneOH - generalizable hand-object interaction denoising
########################################################################################################

import os, logging
from dataclasses import dataclass, field, replace
from typing import Optional, List
import numpy as np
import torch
from tqdm import tqdm

from .utils import (DTYPE, ConfigError, ShapeError, InvalidInputError, FittingError,
                    generator, safe_norm, matrix_to_axis_angle)
from .hoi_scene import JOINT_COUNT, HandSkeleton, HandParams, KNUCKLES, forward_kinematics
from .representation import (S_OFFSETS, T_VO, T_JOINTS, extract_generalized_contact_points,
                             compute_representation, decanonicalize_hand_trajectory, decode_trajectory_from_spatial,
                             compute_temporal_relations, temporal_joint_channels, spatial_offsets, instance_stats,
                             normalize_representation, fit_temporal_stats, random_rotation_augment, with_spatial_offsets)
from .diffusion import (build_linear_schedule, denoise_via_diffusion, denoise_via_autoencoder, train_denoiser,
                        train_autoencoder, TrainConfig)
from .model import save_checkpoint, load_checkpoint

log = logging.getLogger('geneoh.pipeline')

########################################################################################################

@dataclass
class StageConfig:
    t_m: int = 400
    t_s: int = 200
    t_t: int = 100
    temporal_lr: float = 1e-2
    temporal_iters: int = 300
    fit_lr: float = 1e-2
    fit_iters: int = 200
    lambda_d: float = 1.0
    lambda_v: float = 1.0
    lambda_par: float = 1.0
    lambda_perp: float = 1.0
    lambda_recon: float = 1.0
    lambda_reg: float = 1.0
    r_c: float = 0.005
    n_points: int = 128
    k: float = 100.0
    k_a: float = 1.0
    k_b: float = 1.0
    use_spatial: bool = True
    use_temporal: bool = True
    whole_object_contacts: bool = False
    fit: bool = True
    use_diffusion: bool = True        # False routes each stage through its autoencoder instead
    warn_after: int = 50
    T_max: int = 1000

    def __post_init__(self):
        for name in ('t_m', 't_s', 't_t'):
            v = getattr(self, name)
            if not 0 <= v <= self.T_max:
                raise ConfigError(f'{name}={v} outside [0, {self.T_max}]')
        if self.temporal_iters < 0 or self.fit_iters < 0:
            raise ConfigError('iteration counts must be non-negative')
        if not (self.temporal_lr > 0 and self.fit_lr > 0 and self.r_c > 0 and self.n_points > 0 and self.k > 0):
            raise ConfigError('learning rates, r_c, n_points and k must be positive')

@dataclass
class DenoiserBundle:
    model_J: Optional[torch.nn.Module] = None
    model_S: Optional[torch.nn.Module] = None
    model_T: Optional[torch.nn.Module] = None
    schedule: object = None
    t_mean: Optional[torch.Tensor] = None
    t_std: Optional[torch.Tensor] = None
    ae_J: Optional[torch.nn.Module] = None
    ae_S: Optional[torch.nn.Module] = None
    ae_T: Optional[torch.nn.Module] = None

    def __post_init__(self):
        self.schedule = self.schedule or build_linear_schedule()

    def stage_models(self, use_diffusion=True):
        if use_diffusion:
            return self.model_J, self.model_S, self.model_T
        return self.ae_J, self.ae_S, self.ae_T

    @property
    def t_stats(self):
        return None if self.t_mean is None else (self.t_mean, self.t_std)

@dataclass
class DenoiseResult:
    stages: List[torch.Tensor]        # stage 1..3 trajectories [K, 21, 3]
    snapshots: list                   # GeneOHRep after each stage
    keypoints: torch.Tensor           # final trajectory
    params: Optional[HandParams] = None
    diagnostics: dict = field(default_factory=dict)

def _require_model(model, t, name):
    if t > 0 and model is None:
        raise InvalidInputError(f'{name} stage needs a trained model')

def _check_dim(model, dim, name):
    if model is not None and getattr(model, 'dim', dim) != dim:
        raise ShapeError(f'{name} model expects dim {model.dim}, representation has {dim}')

def _rebuild(rep, J):
    return compute_representation(J, rep.frames, rep.k, rep.k_a, rep.k_b)

def _denoise(x, t, model, cfg, rng, schedule, cond=None):
    if cfg.use_diffusion:
        return denoise_via_diffusion(x, t, model, schedule or build_linear_schedule(), rng, cond=cond)
    return denoise_via_autoencoder(x, model, cond)

########################################################################################################
# stages

def run_motion_diff(rep, model, cfg, rng=None, schedule=None, t_stats=None):
    if cfg.t_m == 0:
        return rep.trajectory(), rep
    _require_model(model, cfg.t_m, 'motion')
    K = rep.J_bar.shape[0]
    _check_dim(model, 3 * JOINT_COUNT, 'motion')
    stats = instance_stats(rep.J_bar, rep.S, rep.T, t_stats)
    x = stats.normalize_j(rep.J_bar).reshape(1, K, -1)
    x = _denoise(x, cfg.t_m, model, cfg, rng, schedule)
    J = decanonicalize_hand_trajectory(stats.denormalize_j(x.reshape(K, JOINT_COUNT, 3)), rep.frames)
    return J, _rebuild(rep, J)

def run_spatial_diff(rep, model, cfg, rng=None, schedule=None, t_stats=None):
    K, N = rep.S.shape[:2]
    if cfg.t_s == 0:
        J = decode_trajectory_from_spatial(rep.S, rep.frames)
        return J, _rebuild(rep, J)
    _require_model(model, cfg.t_s, 'spatial')
    _check_dim(model, 3 * JOINT_COUNT, 'spatial')
    stats = instance_stats(rep.J_bar, rep.S, rep.T, t_stats)
    x = stats.normalize_offsets(spatial_offsets(rep.S)).reshape(K * N, -1)
    cond = rep.S[..., :6].reshape(K * N, 6)
    x = _denoise(x, cfg.t_s, model, cfg, rng, schedule, cond)
    S = with_spatial_offsets(rep.S, stats.denormalize_offsets(x.reshape(K, N, JOINT_COUNT, 3)))
    J = decode_trajectory_from_spatial(S, rep.frames)
    return J, _rebuild(rep, J)

def temporal_objective(T_induced, T_target, cfg, t_std=None):
    '''Equal-weighted squared mismatch of d, v^ho, e_par and e_perp, optionally in standardized units.'''
    diff = T_induced - T_target
    if t_std is not None:
        diff = diff / t_std
    ch = temporal_joint_channels(diff)
    return (cfg.lambda_d * ch[..., 0].pow(2).mean() + cfg.lambda_v * ch[..., 1:4].pow(2).mean()
            + cfg.lambda_par * ch[..., 4].pow(2).mean() + cfg.lambda_perp * ch[..., 5].pow(2).mean())

def optimize_to_temporal_target(J_init, frames, T_target, cfg, t_std=None, k=100.0, k_a=1.0, k_b=1.0, verbose=False):
    '''Adam over keypoint displacements (mm) toward T_target; returns the best iterate and the objective curve.'''
    J0 = J_init.detach()
    delta = torch.zeros_like(J0, requires_grad=True)
    opt = torch.optim.Adam([delta], lr=cfg.temporal_lr)
    curve = []
    best_val, best_J = None, J0
    for it in tqdm(range(cfg.temporal_iters + 1), disable=not verbose, leave=False):
        J = J0 + 1e-3 * delta
        obj = temporal_objective(compute_temporal_relations(J, frames, k, k_a, k_b), T_target, cfg, t_std)
        val = obj.item()
        curve.append(val)
        if not np.isfinite(val):
            break
        if best_val is None or val < best_val:
            best_val, best_J = val, J.detach().clone()
        if it == cfg.temporal_iters:
            break
        opt.zero_grad()
        obj.backward()
        opt.step()
    warned = len(curve) > cfg.warn_after and curve[cfg.warn_after] >= curve[0] and curve[0] > 0
    if warned:
        log.warning(f'temporal objective did not decrease after {cfg.warn_after} iterations ({curve[0]:.4g} -> {curve[cfg.warn_after]:.4g})')
    return best_J, curve, warned

def run_temporal_diff(rep, model, cfg, rng=None, schedule=None, t_stats=None, verbose=False):
    '''Denoise T, then fit the trajectory to it. Returns (trajectory, rebuilt rep, objective curve, warning flag).'''
    J_in = rep.trajectory()
    if t_stats is None:
        t_stats = fit_temporal_stats([rep.T])
    t_mean, t_std = t_stats
    if cfg.t_t == 0:
        target = rep.T
    else:
        _require_model(model, cfg.t_t, 'temporal')
        _check_dim(model, 6 * JOINT_COUNT, 'temporal')
        K1, N = rep.T.shape[:2]
        norm = (rep.T - t_mean) / t_std
        x = norm[..., T_JOINTS].reshape(K1 * N, -1)
        cond = norm[..., T_VO].reshape(K1 * N, 3)
        x = _denoise(x, cfg.t_t, model, cfg, rng, schedule, cond)
        target = torch.cat([norm[..., T_VO], x.reshape(K1, N, -1)], -1) * t_std + t_mean
    J, curve, warned = optimize_to_temporal_target(J_in, rep.frames, target, cfg, t_std, rep.k, rep.k_a, rep.k_b, verbose)
    return J, _rebuild(rep, J), curve, warned

########################################################################################################
# fitting

def rigid_align(src, dst):
    '''Least-squares R, t (column convention) with dst ~ R src + t, batched over leading dims.'''
    cs, cd = src.mean(-2, keepdim=True), dst.mean(-2, keepdim=True)
    H = (src - cs).transpose(-1, -2) @ (dst - cd)
    U, _, Vh = torch.linalg.svd(H)
    V = Vh.transpose(-1, -2)
    d = torch.sign(torch.det(V @ U.transpose(-1, -2)))
    D = torch.diag_embed(torch.stack([torch.ones_like(d), torch.ones_like(d), d], -1))
    R = V @ D @ U.transpose(-1, -2)
    t = cd[..., 0, :] - (R @ cs[..., 0, :, None])[..., 0]
    return R, t

def initial_hand_params(J, skeleton):
    K = J.shape[0]
    rest = skeleton.rest_keypoints().to(J.dtype)[list(KNUCKLES)]
    R, t = rigid_align(rest.expand(K, -1, -1), J[:, list(KNUCKLES)])
    p = HandParams.rest((K,), J.dtype)
    return HandParams(matrix_to_axis_angle(R), t, p.pose, p.shape)

def regularization_loss(pose, shape_offset):
    '''mean |beta - 1| + mean |theta| + mean |theta_{k+1} - theta_k|, norms over each frame's block.'''
    K = pose.shape[0]
    theta = pose.reshape(K, -1)
    loss = safe_norm(shape_offset.reshape(K, -1)).mean() + safe_norm(theta).mean()
    if K > 1:
        loss = loss + safe_norm(theta[1:] - theta[:-1]).mean()
    return loss

def fit_hand_parameters(J, skeleton=None, cfg=None, verbose=False):
    skeleton = skeleton or HandSkeleton()
    cfg = cfg or StageConfig()
    J = J.detach().to(DTYPE)
    if J.dim() != 3 or J.shape[0] < 1 or J.shape[1:] != (JOINT_COUNT, 3):
        raise ShapeError(f'trajectory must be [K, {JOINT_COUNT}, 3]')
    init = initial_hand_params(J, skeleton)
    rot = init.root_rot.clone().requires_grad_(True)
    trans_cm = torch.zeros_like(init.root_trans, requires_grad=True)
    pose = init.pose.clone().requires_grad_(True)
    shape_offset = torch.zeros_like(init.shape, requires_grad=True)
    variables = [rot, trans_cm, pose, shape_offset]

    def params():
        return HandParams(rot, init.root_trans + 1e-2 * trans_cm, pose, (1 + shape_offset).clamp(0.55, 1.95))

    def losses():
        pred = forward_kinematics(skeleton, params(), validate=False)
        recon = ((pred - J) * 1e3).pow(2).sum(-1).mean()
        reg = regularization_loss(pose, shape_offset)
        return recon, reg, cfg.lambda_recon * recon + cfg.lambda_reg * reg

    def grad_norm():
        for v in variables:
            v.grad = None
        losses()[2].backward()
        g = torch.sqrt(sum((v.grad ** 2).sum() for v in variables)).item()
        for v in variables:
            v.grad = None
        return g

    g0 = grad_norm()
    opt = torch.optim.Adam(variables, lr=cfg.fit_lr)
    curve = []
    for it in tqdm(range(cfg.fit_iters), disable=not verbose, leave=False):
        recon, reg, total = losses()
        if not torch.isfinite(total):
            raise FittingError('fitting diverged', {'iteration': it, 'curve': curve})
        curve.append(total.item())
        opt.zero_grad()
        total.backward()
        opt.step()
    recon, reg, total = losses()
    if not torch.isfinite(total):
        raise FittingError('fitting diverged', {'iteration': cfg.fit_iters, 'curve': curve})
    diagnostics = {'recon': recon.item(), 'reg': reg.item(), 'loss': total.item(), 'curve': curve,
                   'grad_norm_init': g0, 'grad_norm_final': grad_norm() if cfg.fit_iters else g0}
    log.debug(f'fit recon {diagnostics["recon"]:.4f} mm^2 reg {diagnostics["reg"]:.4f}')
    return params().detach(), diagnostics

########################################################################################################
# cascade

def denoise_sequence(seq, bundle, cfg=None, seed=0, skeleton=None, verbose=False):
    cfg = cfg or StageConfig()
    rng = generator(seed)
    frames = extract_generalized_contact_points(seq, cfg.r_c, cfg.n_points, seed=0, whole_object=cfg.whole_object_contacts)
    rep = compute_representation(seq.keypoints, frames, cfg.k, cfg.k_a, cfg.k_b)
    sched, t_stats = bundle.schedule, bundle.t_stats
    model_J, model_S, model_T = bundle.stage_models(cfg.use_diffusion)
    J1, rep1 = run_motion_diff(rep, model_J, cfg, rng, sched, t_stats)
    if cfg.use_spatial:
        J2, rep2 = run_spatial_diff(rep1, model_S, cfg, rng, sched, t_stats)
    else:
        J2, rep2 = J1, rep1
    diagnostics = {}
    if cfg.use_temporal:
        J3, rep3, curve, warned = run_temporal_diff(rep2, model_T, cfg, rng, sched, t_stats)
        diagnostics.update(temporal_curve=curve, temporal_warning=warned)
    else:
        J3, rep3 = J2, rep2
    params, final = None, J3
    if cfg.fit:
        params, fit_diag = fit_hand_parameters(J3, skeleton, cfg)
        diagnostics['fit'] = fit_diag
        final = forward_kinematics(skeleton or HandSkeleton(), params)
    if verbose:
        log.info(f'denoised {seq.num_frames} frames seed={seed}')
    return DenoiseResult([J1, J2, J3], [rep1, rep2, rep3], final, params, diagnostics)

def trajectory_distance(a, b):
    return (a - b).norm(dim=-1).mean().item()

def denoise_samples(seq, bundle, cfg=None, seeds=(0,), select='closest', skeleton=None):
    if select not in ('closest', 'all'):
        raise ConfigError(f'unknown selection {select!r}')
    results = [denoise_sequence(seq, bundle, cfg, s, skeleton) for s in seeds]
    if select == 'all':
        return results
    return [min(results, key=lambda r: trajectory_distance(r.keypoints, seq.keypoints))]

########################################################################################################
# training sets

def representation_rows(rep, t_stats):
    '''Training rows of one clip: motion [1, K, 63], spatial ([K*N, 63], cond [K*N, 6]), temporal ([(K-1)*N, 126], cond [(K-1)*N, 3]).'''
    norm, _ = normalize_representation(rep, t_stats)
    S, T = norm.S, norm.T
    K = norm.J_bar.shape[0]
    return {
        'motion': (norm.J_bar.reshape(1, K, 3 * JOINT_COUNT), None),
        'spatial': (S[..., S_OFFSETS].reshape(-1, 3 * JOINT_COUNT), S[..., :6].reshape(-1, 6)),
        'temporal': (T[..., T_JOINTS].reshape(-1, 6 * JOINT_COUNT), T[..., T_VO].reshape(-1, 3)),
    }

def frame_windows(x, length):
    '''[1, K, D] clip -> [W, length, D] half-overlapping windows; the last one ends on frame K.'''
    K = x.shape[1]
    stride = max(1, length // 2)
    starts = sorted(set(range(0, K - length + 1, stride)) | {K - length})
    return torch.cat([x[:, s:s + length] for s in starts])

def build_training_sets(seqs, cfg=None, n_augment=1, seed=0, rows_per_clip=2048):
    cfg = cfg or StageConfig()
    reps = []
    for i, seq in enumerate(seqs):
        frames = extract_generalized_contact_points(seq, cfg.r_c, cfg.n_points, seed=0, whole_object=cfg.whole_object_contacts)
        rep = compute_representation(seq.keypoints, frames, cfg.k, cfg.k_a, cfg.k_b)
        reps.append(rep)
        for a in range(n_augment):
            reps.append(random_rotation_augment(rep, seed * 100003 + i * 101 + a))
    if not reps:
        raise InvalidInputError('no clips to train on')
    t_stats = fit_temporal_stats([r.T for r in reps])
    window = min(r.J_bar.shape[0] for r in reps)
    rng = np.random.default_rng(seed)
    sets = {'motion': ([], []), 'spatial': ([], []), 'temporal': ([], [])}
    for rep in reps:
        for name, (x, c) in representation_rows(rep, t_stats).items():
            if name == 'motion':
                x = frame_windows(x, window)
            elif x.shape[0] > rows_per_clip:
                keep = torch.as_tensor(np.sort(rng.choice(x.shape[0], rows_per_clip, replace=False)))
                x, c = x[keep], c[keep]
            sets[name][0].append(x)
            if c is not None:
                sets[name][1].append(c)
    out = {}
    for name, (xs, cs) in sets.items():
        dims = {x.shape[-1] for x in xs}
        if len(dims) != 1:
            raise ShapeError(f'{name} rows drift in dimension {sorted(dims)}')
        out[name] = (torch.cat(xs), torch.cat(cs) if cs else None)
    return out, t_stats

def train_bundle(seqs, cfg=None, train_cfg=None, n_augment=1, seed=0, rows_per_clip=2048, schedule=None,
                 autoencoders=False, verbose=False):
    schedule = schedule or build_linear_schedule()
    train_cfg = train_cfg or TrainConfig(seed=seed)
    sets, (t_mean, t_std) = build_training_sets(seqs, cfg, n_augment, seed, rows_per_clip)
    models, losses = {}, {}
    for name, (x, c) in sets.items():
        tc = train_cfg
        if x.dim() == 3:
            # one motion row carries a whole window of frames
            tc = replace(train_cfg, batch_size=max(1, train_cfg.batch_size // x.shape[1]))
        log.info(f'training {name} denoiser on {x.shape[0]} rows of shape {tuple(x.shape[1:])}')
        models[name], losses[name] = train_denoiser(x, tc, schedule, cond=c, verbose=verbose)
        if autoencoders:
            models[name + '_ae'], losses[name + '_ae'] = train_autoencoder(x, tc, cond=c, verbose=verbose)
    bundle = DenoiserBundle(models['motion'], models['spatial'], models['temporal'], schedule, t_mean, t_std,
                            models.get('motion_ae'), models.get('spatial_ae'), models.get('temporal_ae'))
    return bundle, losses

BUNDLE_FILES = {'motion': 'motion.gohd', 'spatial': 'spatial.gohd', 'temporal': 'temporal.gohd'}
AE_FILES = {'motion': 'motion.ae.gohd', 'spatial': 'spatial.ae.gohd', 'temporal': 'temporal.ae.gohd'}

def save_bundle(folder, bundle):
    os.makedirs(folder, exist_ok=True)
    save_checkpoint(os.path.join(folder, BUNDLE_FILES['motion']), bundle.model_J, bundle.schedule)
    save_checkpoint(os.path.join(folder, BUNDLE_FILES['spatial']), bundle.model_S, bundle.schedule)
    save_checkpoint(os.path.join(folder, BUNDLE_FILES['temporal']), bundle.model_T, bundle.schedule,
                    {'t_mean': bundle.t_mean, 't_std': bundle.t_std})
    for name, ae in zip(AE_FILES, (bundle.ae_J, bundle.ae_S, bundle.ae_T)):
        if ae is not None:
            save_checkpoint(os.path.join(folder, AE_FILES[name]), ae, bundle.schedule)

def load_bundle(folder):
    mJ, sched, _ = load_checkpoint(os.path.join(folder, BUNDLE_FILES['motion']))
    mS, _, _ = load_checkpoint(os.path.join(folder, BUNDLE_FILES['spatial']))
    mT, _, extras = load_checkpoint(os.path.join(folder, BUNDLE_FILES['temporal']))
    aes = []
    for name in AE_FILES:
        path = os.path.join(folder, AE_FILES[name])
        aes.append(load_checkpoint(path)[0] if os.path.exists(path) else None)
    return DenoiserBundle(mJ, mS, mT, sched, extras.get('t_mean'), extras.get('t_std'), *aes)
