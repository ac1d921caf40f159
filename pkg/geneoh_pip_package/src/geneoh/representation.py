########################################################################################################
# GeneOH - generalizable hand-object interaction denoising
########################################################################################################

import logging
from dataclasses import dataclass, replace
from typing import Optional
import numpy as np
import torch
from scipy.spatial import cKDTree

from .utils import (DTYPE, ShapeError, InsufficientFramesError, InvalidShapeError,
                    safe_norm, random_rotation)
from .hoi_scene import JOINT_COUNT

log = logging.getLogger('geneoh.representation')

########################################################################################################
# channel layout
#   S[k, o] = canonical position (3) | canonical normal (3) | 21 canonical offsets (63)
#   T[k, o] = v^o (3) | per joint: d, v^ho (3), e_par, e_perp

S_DIM = 6 + 3 * JOINT_COUNT
T_DIM = 3 + 6 * JOINT_COUNT
S_POS, S_NORMAL, S_OFFSETS = slice(0, 3), slice(3, 6), slice(6, S_DIM)
T_VO, T_JOINTS = slice(0, 3), slice(3, T_DIM)
STD_FLOOR = 1e-6

@dataclass
class ContactFrameSet:
    points: torch.Tensor        # [K, N_o, 3] world
    normals: torch.Tensor       # [K, N_o, 3] world, unit
    rotations: torch.Tensor     # [K, 3, 3] row convention
    translations: torch.Tensor  # [K, 3] centroid of points
    indices: torch.Tensor       # [N_o] rest-frame sample ids

    @property
    def num_frames(self):
        return self.points.shape[0]

    @property
    def num_points(self):
        return self.points.shape[1]

def farthest_point_sampling(points, n, start):
    points = np.asarray(points)
    chosen = [int(start)]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(1, n):
        i = int(np.argmax(dist))
        chosen.append(i)
        dist = np.minimum(dist, np.linalg.norm(points - points[i], axis=1))
    return np.array(chosen)

def hand_distance_to_samples(seq):
    R = seq.poses.rows()
    rest_J = (seq.keypoints - seq.poses.trans[:, None, :]) @ R.transpose(-1, -2)
    tree = cKDTree(rest_J.reshape(-1, 3).numpy())
    d, _ = tree.query(seq.obj.samples.numpy())
    return torch.as_tensor(d, dtype=DTYPE)

def frames_from_indices(seq, indices):
    R = seq.poses.rows()
    P = seq.obj.samples[indices] @ R + seq.poses.trans[:, None, :]
    N = seq.obj.normals[indices] @ R
    return ContactFrameSet(P, N, R, P.mean(1), torch.as_tensor(indices, dtype=torch.long))

def extract_generalized_contact_points(seq, r_c=0.005, n_points=128, seed=0, whole_object=False):
    '''Object samples within r_c of the hand trajectory, reduced to n_points by seeded farthest-point sampling.'''
    if seq.num_frames < 2:
        raise InsufficientFramesError('contact extraction needs at least 2 frames')
    M = len(seq.obj.samples)
    if M == 0:
        raise InvalidShapeError('object has no surface samples')
    if M < n_points:
        raise InvalidShapeError(f'object has {M} samples, fewer than the {n_points} contact points requested')
    rng = np.random.default_rng(seed)
    rest = seq.obj.samples.numpy()
    if whole_object:
        idx = farthest_point_sampling(rest, n_points, rng.integers(M))
    else:
        d = hand_distance_to_samples(seq).numpy()
        cand = np.nonzero(d <= r_c)[0]
        if len(cand) >= n_points:
            idx = cand[farthest_point_sampling(rest[cand], n_points, rng.integers(len(cand)))]
        else:
            log.debug(f'{len(cand)} samples within {r_c} m, using the {n_points} nearest')
            idx = np.argsort(d, kind='stable')[:n_points]
    return frames_from_indices(seq, torch.as_tensor(idx, dtype=torch.long))

########################################################################################################

def _check_frames(x, frames, what='keypoints'):
    if x.shape[0] != frames.num_frames:
        raise ShapeError(f'{what} have {x.shape[0]} frames, contact frames have {frames.num_frames}')

def canonicalize_hand_trajectory(J, frames):
    _check_frames(J, frames)
    return (J - frames.translations[:, None, :]) @ frames.rotations.transpose(-1, -2)

def decanonicalize_hand_trajectory(J_bar, frames):
    _check_frames(J_bar, frames)
    return J_bar @ frames.rotations + frames.translations[:, None, :]

def compute_spatial_relations(J, frames):
    '''[K, N_o, 69]: contact point and normal in the contact frame plus canonical offsets to every keypoint.'''
    _check_frames(J, frames)
    if J.shape[-2:] != (JOINT_COUNT, 3):
        raise ShapeError(f'keypoints must be [K, {JOINT_COUNT}, 3]')
    Rt = frames.rotations.transpose(-1, -2)[:, None]
    pos = (frames.points - frames.translations[:, None, :]) @ Rt[:, 0]
    nrm = frames.normals @ Rt[:, 0]
    off = (J[:, None, :, :] - frames.points[:, :, None, :]) @ Rt
    K, N = pos.shape[:2]
    return torch.cat([pos, nrm, off.reshape(K, N, 3 * JOINT_COUNT)], -1)

def spatial_offsets(S):
    return S[..., S_OFFSETS].reshape(S.shape[:-1] + (JOINT_COUNT, 3))

def compute_temporal_relations(J, frames, k=100.0, k_a=1.0, k_b=1.0):
    '''[K-1, N_o, 129] per-transition relative motion, velocities expressed in the start frame's contact frame.'''
    if J.shape[0] < 2:
        raise InsufficientFramesError('temporal relations need at least 2 frames')
    _check_frames(J, frames)
    P, n = frames.points, frames.normals
    v_h = J[1:] - J[:-1]
    v_o = P[1:] - P[:-1]
    v_ho = v_h[:, None] - v_o[:, :, None]                      # [K-1, N, 21, 3]
    n0 = n[:-1, :, None, :]
    v_perp = (v_ho * n0).sum(-1, keepdim=True) * n0
    v_par = v_ho - v_perp
    d = safe_norm(J[:-1, None] - P[:-1, :, None, :])            # [K-1, N, 21]
    w = torch.exp(-k * d)
    e_par = w * k_a * safe_norm(v_par)
    e_perp = w * k_b * safe_norm(v_perp)
    Rt = frames.rotations[:-1].transpose(-1, -2)
    vo_c = v_o @ Rt
    vho_c = v_ho @ Rt[:, None]
    joints = torch.cat([d[..., None], vho_c, e_par[..., None], e_perp[..., None]], -1)
    K1, N = vo_c.shape[:2]
    return torch.cat([vo_c, joints.reshape(K1, N, 6 * JOINT_COUNT)], -1)

def temporal_joint_channels(T):
    '''Per joint view [..., 21, 6] of (d, v^ho, e_par, e_perp).'''
    return T[..., T_JOINTS].reshape(T.shape[:-1] + (JOINT_COUNT, 6))

def decode_trajectory_from_spatial(S, frames):
    _check_frames(S, frames, 'spatial relations')
    if S.shape[1] != frames.num_points or S.shape[-1] != S_DIM:
        raise ShapeError('spatial relations do not match the contact frames')
    off = spatial_offsets(S) @ frames.rotations[:, None]
    return (off + frames.points[:, :, None, :]).mean(1)

def world_offsets(J, frames):
    return J[:, None] - frames.points[:, :, None]

def integrate_temporal_to_offsets(T, first_offsets, frames=None):
    '''Euler integration of h - o with unit time step. Without frames the stored velocities are taken as world vectors.'''
    v = temporal_joint_channels(T)[..., 1:4]
    if frames is not None:
        if frames.num_frames != T.shape[0] + 1:
            raise ShapeError('temporal relations do not match the contact frames')
        v = v @ frames.rotations[:-1, None]
    if tuple(first_offsets.shape) != tuple(v.shape[1:]):
        raise ShapeError(f'first offsets must be {tuple(v.shape[1:])}')
    steps = torch.cumsum(v, 0)
    return torch.cat([first_offsets[None], first_offsets[None] + steps], 0)

def penetration_witness(J, frames):
    '''Per frame and keypoint, max over contact points of n . (h - o); negative inside a convex object.'''
    _check_frames(J, frames)
    dots = (world_offsets(J, frames) * frames.normals[:, :, None, :]).sum(-1)
    return dots.max(1).values

########################################################################################################

@dataclass
class NormStats:
    j_mean: torch.Tensor  # [3]
    j_std: torch.Tensor
    o_mean: torch.Tensor  # [N_o, 3]
    o_std: torch.Tensor
    t_mean: torch.Tensor  # [129]
    t_std: torch.Tensor

    def normalize_j(self, J_bar):
        return (J_bar - self.j_mean) / self.j_std

    def denormalize_j(self, x):
        return x * self.j_std + self.j_mean

    def normalize_offsets(self, off):
        return (off - self.o_mean[:, None, :]) / self.o_std[:, None, :]

    def denormalize_offsets(self, x):
        return x * self.o_std[:, None, :] + self.o_mean[:, None, :]

    def normalize_t(self, T):
        return (T - self.t_mean) / self.t_std

    def denormalize_t(self, x):
        return x * self.t_std + self.t_mean

def fit_temporal_stats(temporal_list):
    rows = torch.cat([t.reshape(-1, T_DIM) for t in temporal_list], 0)
    return rows.mean(0), rows.std(0, unbiased=False).clamp_min(STD_FLOOR)

def instance_stats(J_bar, S, T=None, t_stats=None):
    flat = J_bar.reshape(-1, 3)
    off = spatial_offsets(S)                                    # [K, N, 21, 3]
    per_point = off.transpose(0, 1).reshape(off.shape[1], -1, 3)
    if t_stats is None:
        t_stats = fit_temporal_stats([T])
    return NormStats(flat.mean(0), flat.std(0, unbiased=False).clamp_min(STD_FLOOR),
                     per_point.mean(1), per_point.std(1, unbiased=False).clamp_min(STD_FLOOR),
                     *t_stats)

@dataclass
class GeneOHRep:
    J_bar: torch.Tensor   # [K, 21, 3]
    S: torch.Tensor       # [K, N_o, 69]
    T: torch.Tensor       # [K-1, N_o, 129]
    frames: ContactFrameSet
    k: float = 100.0
    k_a: float = 1.0
    k_b: float = 1.0
    stats: Optional[NormStats] = None
    normalized: bool = False

    def trajectory(self):
        return decanonicalize_hand_trajectory(self.J_bar, self.frames)

def compute_representation(J, frames, k=100.0, k_a=1.0, k_b=1.0):
    return GeneOHRep(canonicalize_hand_trajectory(J, frames), compute_spatial_relations(J, frames),
                     compute_temporal_relations(J, frames, k, k_a, k_b), frames, k, k_a, k_b)

def with_spatial_offsets(S, off):
    return torch.cat([S[..., :6], off.reshape(S.shape[:-1] + (3 * JOINT_COUNT,))], -1)

def normalize_representation(rep, t_stats=None):
    '''Per-instance J_bar stats, per-contact-point offset stats, corpus T stats (instance T stats when none given).'''
    if rep.normalized:
        return rep, rep.stats
    stats = instance_stats(rep.J_bar, rep.S, rep.T, t_stats)
    out = replace(rep, J_bar=stats.normalize_j(rep.J_bar),
                  S=with_spatial_offsets(rep.S, stats.normalize_offsets(spatial_offsets(rep.S))),
                  T=stats.normalize_t(rep.T), stats=stats, normalized=True)
    return out, stats

def denormalize_representation(rep, stats=None):
    stats = stats or rep.stats
    if not rep.normalized:
        return rep
    return replace(rep, J_bar=stats.denormalize_j(rep.J_bar),
                   S=with_spatial_offsets(rep.S, stats.denormalize_offsets(spatial_offsets(rep.S))),
                   T=stats.denormalize_t(rep.T), normalized=False)

def rotate_representation(rep, R):
    '''Right-apply one row-convention rotation to every vector block; scalar channels stay put.'''
    K, N = rep.S.shape[:2]
    S = torch.cat([rep.S[..., S_POS] @ R, rep.S[..., S_NORMAL] @ R,
                   (spatial_offsets(rep.S) @ R).reshape(K, N, 3 * JOINT_COUNT)], -1)
    tj = temporal_joint_channels(rep.T)
    tj = torch.cat([tj[..., :1], tj[..., 1:4] @ R, tj[..., 4:]], -1)
    T = torch.cat([rep.T[..., T_VO] @ R, tj.reshape(rep.T.shape[:-1] + (6 * JOINT_COUNT,))], -1)
    frames = replace(rep.frames, rotations=R.transpose(-1, -2) @ rep.frames.rotations)
    return replace(rep, J_bar=rep.J_bar @ R, S=S, T=T, frames=frames)

def random_rotation_augment(rep, seed, rotation=None):
    R = random_rotation(seed) if rotation is None else torch.as_tensor(rotation, dtype=DTYPE)
    return rotate_representation(rep, R)
