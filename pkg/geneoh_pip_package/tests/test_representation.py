import math
import numpy as np
import pytest
import torch

from geneoh.utils import InsufficientFramesError, InvalidShapeError, ShapeError, random_rotation, matrix_to_quaternion
from geneoh.hoi_scene import HOISequence, ObjectPose, make_object, object_sdf
from geneoh.representation import (
    S_DIM, T_DIM, ContactFrameSet, extract_generalized_contact_points, frames_from_indices,
    canonicalize_hand_trajectory, decanonicalize_hand_trajectory, compute_spatial_relations, spatial_offsets,
    compute_temporal_relations, temporal_joint_channels, decode_trajectory_from_spatial, world_offsets,
    integrate_temporal_to_offsets, penetration_witness, compute_representation, with_spatial_offsets,
    normalize_representation, denormalize_representation, fit_temporal_stats, rotate_representation,
    random_rotation_augment, instance_stats,
)

def static_sphere_scene(J, n_samples=2048):
    K = J.shape[0]
    return HOISequence(J, make_object('sphere', (0.05,), n_samples), ObjectPose.identity((K,)))

def fingertip_above_pole(K=3):
    J = torch.zeros(K, 21, 3)
    J[..., 2] = 0.2
    J[:, 8] = torch.tensor([0.0, 0.0, 0.053])
    return J

def single_point_frames(points, normals, rotations=None):
    K = points.shape[0]
    R = torch.eye(3).expand(K, 3, 3).clone() if rotations is None else rotations
    return ContactFrameSet(points[:, None], normals[:, None], R, points, torch.zeros(1, dtype=torch.long))

########################################################################################################
# contact extraction

def test_contacts_cluster_around_touching_keypoint():
    seq = static_sphere_scene(fingertip_above_pole())
    tip = torch.tensor([0.0, 0.0, 0.053])
    c = extract_generalized_contact_points(seq, r_c=0.02, n_points=16)
    assert c.points.shape == (3, 16, 3)
    assert float((c.points - tip).norm(dim=-1).max()) <= 0.02
    assert float(c.normals[..., 2].min()) > 0.9
    assert len(set(c.indices.tolist())) == 16

def test_contact_points_use_radius_when_enough_candidates():
    seq = static_sphere_scene(fingertip_above_pole())
    tip = torch.tensor([0.0, 0.0, 0.053])
    c = extract_generalized_contact_points(seq, r_c=0.005, n_points=2)
    assert float((c.points - tip).norm(dim=-1).max()) <= 0.005

def test_contact_fallback_takes_nearest_samples():
    seq = static_sphere_scene(fingertip_above_pole())
    c = extract_generalized_contact_points(seq, r_c=0.005, n_points=16)
    d = torch.cdist(seq.obj.samples, seq.keypoints.reshape(-1, 3)).min(-1).values
    expected = set(torch.argsort(d)[:16].tolist())
    assert set(c.indices.tolist()) == expected

def test_contact_extraction_is_seeded(clean_seq):
    a = extract_generalized_contact_points(clean_seq, n_points=32, seed=1, whole_object=True)
    b = extract_generalized_contact_points(clean_seq, n_points=32, seed=1, whole_object=True)
    assert torch.equal(a.indices, b.indices)
    assert len(set(a.indices.tolist())) == 32

def test_contact_frames_follow_object(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=64)
    d, n = object_sdf(clean_seq.obj, clean_seq.poses, c.points)
    assert float(d.abs().max()) < 1e-9
    assert torch.allclose(n, c.normals, atol=1e-9)
    assert torch.allclose(c.translations, c.points.mean(1), atol=1e-15)

def test_contact_extraction_errors():
    seq = static_sphere_scene(fingertip_above_pole(), n_samples=64)
    with pytest.raises(InvalidShapeError):
        extract_generalized_contact_points(seq, n_points=128)
    one = static_sphere_scene(fingertip_above_pole(1))
    with pytest.raises(InsufficientFramesError):
        extract_generalized_contact_points(one)

########################################################################################################
# canonical trajectory and spatial relations

def test_canonical_round_trip(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=64)
    J_bar = canonicalize_hand_trajectory(clean_seq.keypoints, c)
    assert torch.allclose(decanonicalize_hand_trajectory(J_bar, c), clean_seq.keypoints, atol=1e-12)

def test_frame_count_mismatch(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=64)
    with pytest.raises(ShapeError):
        canonicalize_hand_trajectory(clean_seq.keypoints[:-1], c)

def test_spatial_relations_single_point():
    o = torch.tensor([[0.1, 0.0, 0.0], [0.1, 0.0, 0.0]])
    n = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    R = torch.stack([torch.eye(3), torch.tensor([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])])
    frames = single_point_frames(o, n, R)
    J = 0.1 + 0.01 * torch.arange(2 * 21 * 3, dtype=torch.float64).reshape(2, 21, 3) / 100
    S = compute_spatial_relations(J, frames)
    assert S.shape == (2, 1, S_DIM)
    assert torch.allclose(S[:, 0, :3], torch.zeros(2, 3), atol=1e-15)
    assert torch.allclose(S[0, 0, 3:6], torch.tensor([1.0, 0.0, 0.0]))
    assert torch.allclose(S[1, 0, 3:6], n[1] @ R[1].T)
    off = spatial_offsets(S)
    assert torch.allclose(off[0, 0], J[0] - o[0], atol=1e-15)
    assert torch.allclose(off[1, 0], (J[1] - o[1]) @ R[1].T, atol=1e-15)

def test_decode_recovers_clean_trajectory(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=64)
    S = compute_spatial_relations(clean_seq.keypoints, c)
    assert torch.allclose(decode_trajectory_from_spatial(S, c), clean_seq.keypoints, atol=1e-12)

def test_decode_averages_contact_points(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=64)
    S = compute_spatial_relations(clean_seq.keypoints, c)
    shift = torch.zeros(64, 1, 3)
    shift[:32, 0, 0] = 0.002
    off = spatial_offsets(S) + shift
    out = decode_trajectory_from_spatial(with_spatial_offsets(S, off), c)
    expected = clean_seq.keypoints + (torch.tensor([0.001, 0.0, 0.0]) @ c.rotations)[:, None, :]
    assert torch.allclose(out, expected, atol=1e-12)

########################################################################################################
# temporal relations

def test_temporal_relations_oracle():
    o = torch.tensor([[0.0, 0.0, 0.0], [0.001, 0.0, 0.0]])
    n = torch.tensor([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    Rz = torch.tensor([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    frames = single_point_frames(o, n, torch.stack([Rz, Rz]))
    J = torch.zeros(2, 21, 3)
    J[0] = torch.tensor([0.0, 0.0, 0.01])
    J[1] = torch.tensor([0.003, 0.0, 0.014])
    T = compute_temporal_relations(J, frames, k=100.0)
    assert T.shape == (1, 1, T_DIM)
    v_o = torch.tensor([0.001, 0.0, 0.0])
    v_ho = torch.tensor([0.002, 0.0, 0.004])
    assert torch.allclose(T[0, 0, :3], v_o @ Rz.T, atol=1e-15)
    ch = temporal_joint_channels(T)[0, 0]
    w = math.exp(-1.0)
    for j in range(21):
        assert float(ch[j, 0]) == pytest.approx(0.01, abs=1e-15)
        assert torch.allclose(ch[j, 1:4], v_ho @ Rz.T, atol=1e-15)
        assert float(ch[j, 4]) == pytest.approx(w * 0.002, rel=1e-12)
        assert float(ch[j, 5]) == pytest.approx(w * 0.004, rel=1e-12)

def test_temporal_gains_scale_energies(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=16)
    a = temporal_joint_channels(compute_temporal_relations(clean_seq.keypoints, c))
    b = temporal_joint_channels(compute_temporal_relations(clean_seq.keypoints, c, k_a=2.0, k_b=3.0))
    assert torch.allclose(b[..., 4], 2 * a[..., 4], atol=1e-15)
    assert torch.allclose(b[..., 5], 3 * a[..., 5], atol=1e-15)
    assert torch.equal(a[..., :4], b[..., :4])

def test_temporal_needs_two_frames():
    frames = single_point_frames(torch.zeros(1, 3), torch.tensor([[0.0, 0.0, 1.0]]))
    with pytest.raises(InsufficientFramesError):
        compute_temporal_relations(torch.zeros(1, 21, 3), frames)

def test_integrate_recovers_offsets(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=32)
    T = compute_temporal_relations(clean_seq.keypoints, c)
    off = world_offsets(clean_seq.keypoints, c)
    assert torch.allclose(integrate_temporal_to_offsets(T, off[0], c), off, atol=1e-12)

def test_integrate_single_step():
    first = torch.ones(1, 21, 3)
    T = torch.zeros(1, 1, T_DIM)
    T[..., 4::6] = 0.5
    out = integrate_temporal_to_offsets(T, first)
    assert out.shape == (2, 1, 21, 3)
    assert torch.allclose(out[1, ..., 0], torch.full((1, 21), 1.5))
    assert torch.equal(out[1, ..., 1:], first[..., 1:])

def test_integrate_zero_velocity():
    first = torch.randn(4, 21, 3)
    out = integrate_temporal_to_offsets(torch.zeros(5, 4, T_DIM), first)
    assert torch.equal(out, first.expand(6, 4, 21, 3))

def test_integrate_shape_check():
    with pytest.raises(ShapeError):
        integrate_temporal_to_offsets(torch.zeros(5, 4, T_DIM), torch.zeros(3, 21, 3))

########################################################################################################
# penetration witness

@pytest.mark.parametrize('kind', ['sphere', 'box', 'cylinder'])
def test_penetration_witness_matches_sdf_sign(kind):
    K = 160
    obj = make_object(kind, None, 2048)
    pose = ObjectPose(matrix_to_quaternion(random_rotation(len(kind)).T), torch.tensor([0.1, -0.05, 0.2]))
    poses = ObjectPose(pose.quat.expand(K, 4), pose.trans.expand(K, 3))
    g = torch.Generator().manual_seed(0)
    J = pose.trans + 3 * obj.bounding_radius * (torch.rand(K, 21, 3, generator=g) - 0.5)
    seq = HOISequence(J, obj, poses)
    c = extract_generalized_contact_points(seq, n_points=512, whole_object=True)
    w = penetration_witness(J, c)
    d, _ = object_sdf(obj, poses, J)
    assert bool((d < 0).any()) and bool((d > 0).any())
    agree = ((w < 0) == (d < 0)).double().mean()
    assert float(agree) >= 0.99

########################################################################################################
# representation

def test_representation_shapes(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=32)
    rep = compute_representation(clean_seq.keypoints, c)
    K = clean_seq.num_frames
    assert rep.J_bar.shape == (K, 21, 3)
    assert rep.S.shape == (K, 32, S_DIM)
    assert rep.T.shape == (K - 1, 32, T_DIM)
    assert torch.allclose(rep.trajectory(), clean_seq.keypoints, atol=1e-12)

def test_rigid_motion_invariance(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=32)
    rep = compute_representation(clean_seq.keypoints, c)
    g = torch.Generator().manual_seed(0)
    for seed in range(200):
        G = random_rotation(seed)
        shift = torch.rand(3, generator=g) - 0.5
        R = clean_seq.poses.rows() @ G
        poses = ObjectPose(matrix_to_quaternion(R.transpose(-1, -2)), clean_seq.poses.trans @ G + shift)
        moved = HOISequence(clean_seq.keypoints @ G + shift, clean_seq.obj, poses)
        rep2 = compute_representation(moved.keypoints, frames_from_indices(moved, c.indices))
        assert torch.allclose(rep.J_bar, rep2.J_bar, atol=1e-9)
        assert torch.allclose(rep.S, rep2.S, atol=1e-9)
        assert torch.allclose(rep.T, rep2.T, atol=1e-9)

def test_rotation_augment_identity(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=16)
    rep = compute_representation(clean_seq.keypoints, c)
    out = random_rotation_augment(rep, 0, rotation=torch.eye(3))
    assert torch.equal(out.J_bar, rep.J_bar)
    assert torch.equal(out.S, rep.S)
    assert torch.equal(out.T, rep.T)

def test_rotation_augment_preserves_geometry(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=16)
    rep = compute_representation(clean_seq.keypoints, c)
    out = random_rotation_augment(rep, seed=3)
    assert torch.allclose(spatial_offsets(out.S).norm(dim=-1), spatial_offsets(rep.S).norm(dim=-1), atol=1e-12)
    a, b = temporal_joint_channels(rep.T), temporal_joint_channels(out.T)
    assert torch.equal(a[..., 0], b[..., 0])
    assert torch.equal(a[..., 4:], b[..., 4:])
    assert torch.allclose(a[..., 1:4].norm(dim=-1), b[..., 1:4].norm(dim=-1), atol=1e-12)
    assert torch.allclose(out.trajectory(), clean_seq.keypoints, atol=1e-12)

def test_rotations_compose(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=16)
    rep = compute_representation(clean_seq.keypoints, c)
    R1, R2 = random_rotation(1), random_rotation(2)
    a = rotate_representation(rotate_representation(rep, R1), R2)
    b = rotate_representation(rep, R1 @ R2)
    for x, y in ((a.J_bar, b.J_bar), (a.S, b.S), (a.T, b.T), (a.frames.rotations, b.frames.rotations)):
        assert torch.allclose(x, y, atol=1e-12)

def test_normalization_round_trip(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=16)
    rep = compute_representation(clean_seq.keypoints, c)
    norm, stats = normalize_representation(rep)
    flat = norm.J_bar.reshape(-1, 3)
    assert torch.allclose(flat.mean(0), torch.zeros(3), atol=1e-9)
    assert torch.allclose(flat.std(0, unbiased=False), torch.ones(3), atol=1e-9)
    assert torch.equal(norm.S[..., :6], rep.S[..., :6])
    again, same = normalize_representation(norm)
    assert again is norm and same is stats
    back = denormalize_representation(norm)
    assert not back.normalized
    assert torch.allclose(back.J_bar, rep.J_bar, atol=1e-12)
    assert torch.allclose(back.S, rep.S, atol=1e-12)
    assert torch.allclose(back.T, rep.T, atol=1e-12)

def test_corpus_temporal_stats(clean_seq, box_seq):
    reps = []
    for seq in (clean_seq, box_seq):
        c = extract_generalized_contact_points(seq, n_points=16)
        reps.append(compute_representation(seq.keypoints, c))
    mean, std = fit_temporal_stats([r.T for r in reps])
    assert mean.shape == std.shape == (T_DIM,)
    assert float(std.min()) >= 1e-6
    norm, stats = normalize_representation(reps[0], (mean, std))
    assert torch.allclose(norm.T, (reps[0].T - mean) / std)
    assert torch.equal(stats.t_mean, mean)

def welford(rows):
    '''Streaming mean and population std over an iterable of equal-length vectors.'''
    n, mean, m2 = 0, None, None
    for x in rows:
        x = np.asarray(x, dtype=np.float64)
        if mean is None:
            mean, m2 = np.zeros_like(x), np.zeros_like(x)
        n += 1
        d = x - mean
        mean += d / n
        m2 += d * (x - mean)
    return mean, np.sqrt(m2 / n)

def test_instance_stats_match_streaming_oracle(clean_seq):
    c = extract_generalized_contact_points(clean_seq, n_points=8)
    rep = compute_representation(clean_seq.keypoints, c)
    stats = instance_stats(rep.J_bar, rep.S, rep.T)
    K = rep.J_bar.shape[0]
    mean, std = welford(rep.J_bar[k, j].numpy() for k in range(K) for j in range(21))
    assert np.allclose(stats.j_mean.numpy(), mean, atol=1e-12)
    assert np.allclose(stats.j_std.numpy(), std, atol=1e-12)
    off = spatial_offsets(rep.S)
    for p in range(off.shape[1]):
        mean, std = welford(off[k, p, j].numpy() for k in range(K) for j in range(21))
        assert np.allclose(stats.o_mean[p].numpy(), mean, atol=1e-12)
        assert np.allclose(stats.o_std[p].numpy(), std, atol=1e-12)
    mean, std = welford(rep.T[k, p].numpy() for k in range(K - 1) for p in range(rep.T.shape[1]))
    assert np.allclose(stats.t_mean.numpy(), mean, atol=1e-10)
    assert np.allclose(stats.t_std.numpy(), np.maximum(std, 1e-6), atol=1e-10)

def test_instance_stats_floor_constant_axes():
    J = torch.zeros(2, 21, 3)
    J[:, :, 0] = torch.linspace(0, 1, 21)
    S = torch.zeros(2, 1, S_DIM)
    stats = instance_stats(J, S, t_stats=(torch.zeros(T_DIM), torch.ones(T_DIM)))
    assert float(stats.j_std[0]) > 0.1
    assert float(stats.j_std[1]) == float(stats.j_std[2]) == 1e-6
    assert torch.equal(stats.o_std, torch.full((1, 3), 1e-6))
