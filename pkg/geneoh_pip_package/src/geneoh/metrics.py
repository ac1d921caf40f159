########################################################################################################
# GeneOH - generalizable hand-object interaction denoising
########################################################################################################

import logging
from dataclasses import dataclass, fields
from typing import Optional
import numpy as np
import torch

from .utils import DTYPE, ShapeError, InvalidInputError
from .hoi_scene import HandSkeleton, hand_surface_from_keypoints, hand_capsule_sdf, object_sdf
from .representation import extract_generalized_contact_points

log = logging.getLogger('geneoh.metrics')

UNITS = {
    'mpjpe': 'mm', 'mpvpe': 'mm', 'c_iou': '%', 'iv': 'cm^3', 'penetration_depth': 'mm',
    'proximity_error': 'mm', 'motion_consistency': 'mm^2',
}

def _check_pair(pred, gt):
    if pred.keypoints.shape != gt.keypoints.shape:
        raise ShapeError(f'sequence shapes differ: {tuple(pred.keypoints.shape)} vs {tuple(gt.keypoints.shape)}')

def _object_points(seq, contacts):
    '''Posed contact points [K, N, 3], or every posed object sample when no contact set is given.'''
    if contacts is None:
        return seq.object_points()[0]
    if contacts.num_frames != seq.num_frames:
        raise ShapeError('contact frames do not match the sequence')
    return contacts.points

########################################################################################################

def mpjpe_mpvpe(pred, gt, skeleton=None, density=500.0):
    _check_pair(pred, gt)
    skeleton = skeleton or HandSkeleton()
    mpjpe = (pred.keypoints - gt.keypoints).norm(dim=-1).mean().item() * 1e3
    vp, _ = hand_surface_from_keypoints(skeleton, pred.keypoints, density)
    vg, _ = hand_surface_from_keypoints(skeleton, gt.keypoints, density)
    return mpjpe, (vp - vg).norm(dim=-1).mean().item() * 1e3

def contact_map(hand, obj_points, threshold):
    '''[K, N] bool: object point within threshold of any hand point.'''
    return torch.cdist(obj_points, hand).min(-1).values <= threshold

def contact_iou(pred, gt, contacts=None, threshold=0.002, surface=False, skeleton=None, density=500.0):
    '''IoU (%) of predicted vs ground-truth contact maps pooled over frames; 100 when both are empty.'''
    _check_pair(pred, gt)
    obj = _object_points(gt, contacts)
    hp, hg = pred.keypoints, gt.keypoints
    if surface:
        skeleton = skeleton or HandSkeleton()
        hp = hand_surface_from_keypoints(skeleton, hp, density)[0]
        hg = hand_surface_from_keypoints(skeleton, hg, density)[0]
    a, b = contact_map(hp, obj, threshold), contact_map(hg, obj, threshold)
    union = (a | b).sum().item()
    if union == 0:
        return 100.0
    return 100.0 * (a & b).sum().item() / union

def intersection_volume(inside_a, inside_b, lo, hi, voxel=0.002, chunk=1 << 16):
    '''Volume (m^3) of voxel centres in [lo, hi] accepted by both inside tests.'''
    lo, hi = torch.as_tensor(lo, dtype=DTYPE), torch.as_tensor(hi, dtype=DTYPE)
    if not voxel > 0:
        raise InvalidInputError('voxel size must be positive')
    if bool((hi < lo).any()) or not bool(torch.isfinite(torch.cat([lo, hi])).all()):
        raise InvalidInputError('degenerate bounding box')
    n = torch.clamp(torch.ceil((hi - lo) / voxel), min=1).long()
    axes = [lo[i] + (torch.arange(int(n[i]), dtype=DTYPE) + 0.5) * voxel for i in range(3)]
    grid = torch.stack(torch.meshgrid(*axes, indexing='ij'), -1).reshape(-1, 3)
    count = 0
    for s in range(0, len(grid), chunk):
        q = grid[s:s + chunk]
        ina = inside_a(q)
        if bool(ina.any()):
            count += int((inside_b(q[ina])).sum())
    return count * voxel ** 3

def penetration_metrics(seq, skeleton=None, voxel=0.002, density=500.0):
    '''(IV cm^3, depth mm), each averaged over frames.'''
    skeleton = skeleton or HandSkeleton()
    if not voxel > 0:
        raise InvalidInputError('voxel size must be positive')
    surf, _ = hand_surface_from_keypoints(skeleton, seq.keypoints, density)
    d, _ = object_sdf(seq.obj, seq.poses, surf)
    depth = (-d.min(-1).values).clamp_min(0).mean().item() * 1e3
    obj_pts, _ = seq.object_points()
    # surface samples are discrete, so grow the hand box to cover every capsule
    pad = float(skeleton.radii.max())
    ivs = []
    for k in range(seq.num_frames):
        lo = torch.maximum(surf[k].min(0).values - pad, obj_pts[k].min(0).values)
        hi = torch.minimum(surf[k].max(0).values + pad, obj_pts[k].max(0).values)
        if bool((hi <= lo).any()):
            ivs.append(0.0)
            continue
        pose, J = seq.poses[k], seq.keypoints[k]
        ivs.append(intersection_volume(lambda q: object_sdf(seq.obj, pose, q)[0] < 0,
                                       lambda q: hand_capsule_sdf(skeleton, J, q) <= 0, lo, hi, voxel))
    return float(np.mean(ivs)) * 1e6, depth

def proximity_error(pred, gt, contacts=None):
    '''Mean over frames and keypoints of |d_min(pred) - d_min(gt)| in mm.'''
    _check_pair(pred, gt)
    obj = _object_points(gt, contacts)
    dp = torch.cdist(pred.keypoints, obj).min(-1).values
    dg = torch.cdist(gt.keypoints, obj).min(-1).values
    return (dp - dg).abs().mean().item() * 1e3

def motion_consistency(seq, contacts=None, static_eps=1e-4, k=100.0):
    '''Mean over non-static transitions of |exp(-k d) dh - do|^2 for the nearest hand-object pair, mm^2.

    Returns (value, evaluated transition count); a fully static sequence gives (0.0, 0).
    '''
    if seq.num_frames < 2:
        raise ShapeError('motion consistency needs at least 2 frames')
    obj = _object_points(seq, contacts)
    J = seq.keypoints
    d_o = obj[1:] - obj[:-1]
    moving = (d_o.norm(dim=-1) >= static_eps).any(-1)
    if not bool(moving.any()):
        log.debug('object static in every frame, motion consistency skipped')
        return 0.0, 0
    dist = torch.cdist(J[:-1], obj[:-1])                     # [K-1, 21, N]
    flat = dist.reshape(dist.shape[0], -1).argmin(-1)
    jh, jo = flat // dist.shape[2], flat % dist.shape[2]
    ar = torch.arange(dist.shape[0])
    dmin = dist[ar, jh, jo]
    dh = (J[1:] - J[:-1])[ar, jh]
    do = d_o[ar, jo]
    err = ((torch.exp(-k * dmin)[:, None] * dh - do) * 1e3).pow(2).sum(-1)
    return err[moving].mean().item(), int(moving.sum())

########################################################################################################

@dataclass
class MetricsReport:
    iv: float
    penetration_depth: float
    motion_consistency: float
    motion_frames: int = 0
    mpjpe: Optional[float] = None
    mpvpe: Optional[float] = None
    c_iou: Optional[float] = None
    proximity_error: Optional[float] = None

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}
        out['units'] = {k: v for k, v in UNITS.items() if k in out}
        return out

def evaluate_sequence(pred, gt=None, contacts=None, skeleton=None, voxel=0.002, threshold=0.002, surface_contacts=False):
    '''All metrics for one clip; GT-relative fields stay None without ground truth.'''
    ref = gt if gt is not None else pred
    if contacts is None:
        contacts = extract_generalized_contact_points(ref, seed=0)
    iv, depth = penetration_metrics(pred, skeleton, voxel)
    mc, frames = motion_consistency(pred, contacts)
    report = MetricsReport(iv, depth, mc, frames)
    if gt is not None:
        report.mpjpe, report.mpvpe = mpjpe_mpvpe(pred, gt, skeleton)
        report.c_iou = contact_iou(pred, gt, contacts, threshold, surface_contacts, skeleton)
        report.proximity_error = proximity_error(pred, gt, contacts)
    return report

def summarize_reports(reports):
    '''median / mean / std / count per metric over the reports that carry it.'''
    out = {}
    for name in UNITS:
        vals = np.array([getattr(r, name) for r in reports if getattr(r, name) is not None], dtype=np.float64)
        if len(vals):
            out[name] = {'median': float(np.median(vals)), 'mean': float(vals.mean()),
                         'std': float(vals.std()), 'count': int(len(vals))}
    return out
