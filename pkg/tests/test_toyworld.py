import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmflow.errors import ContractError, DataIOError
from mmflow.modality import Alignment, Modality, alignment_of
from mmflow.numerics.rng import Rng
from mmflow.toyworld import (
    PALETTE,
    PART_COLORS,
    SceneObject,
    SceneSpec,
    build_dataset,
    caption,
    decode_flow,
    generate_scene,
    make_dataset,
    owner_map,
    read_dataset,
    render,
    render_all,
    write_dataset,
)

EXTENT = (4, 16, 16)


def _obj(**kw):
    base = dict(shape="disk", half_size=3.0, z=0.5, color=(0.9, 0.2, 0.2), p0=(8.0, 8.0), vel=(0.0, 0.0), class_id=0)
    base.update(kw)
    return SceneObject(**base)


def test_easy_has_one_object():
    for s in range(20):
        assert len(generate_scene(Rng(s), "easy", EXTENT).objects) == 1


def test_generation_is_deterministic():
    assert generate_scene(Rng(9), "standard") == generate_scene(Rng(9), "standard")


def test_standard_scenes_stay_in_bounds():
    T, H, W = (8, 32, 32)
    counts = set()
    for s in range(1000):
        scene = generate_scene(Rng(s), "standard", (T, H, W))
        counts.add(len(scene.objects))
        zs = [o.z for o in scene.objects]
        assert len(set(zs)) == len(zs) and all(0 < z <= 1 for z in zs)
        for o in scene.objects:
            for f in range(T):
                ch, cw = o.center(f)
                assert 0 <= ch < H and 0 <= cw < W
    assert counts == {1, 2, 3, 4}


def test_scene_invariants_enforced():
    with pytest.raises(ContractError):
        SceneSpec(objects=(), extent=EXTENT)
    with pytest.raises(ContractError):
        SceneSpec(objects=(_obj(), _obj(class_id=1)), extent=EXTENT)
    with pytest.raises(ContractError):
        SceneSpec(objects=(_obj(vel=(5.0, 0.0)),), extent=EXTENT)


def test_background_contract():
    scene = SceneSpec(objects=(_obj(half_size=1.0),), extent=EXTENT)
    assert np.all(render(scene, "depth")[:, 0, 0] == 1.0)
    assert np.all(render(scene, "flow")[:, 0, 0] == 0.5)
    assert np.allclose(render(scene, "rgb")[:, 0, 0], 0.1)
    assert np.all(render(scene, "segmentation")[:, 0, 0] == 0.0)


def test_zero_motion_flow_encoding():
    scene = SceneSpec(objects=(_obj(),), extent=EXTENT)
    flow = render(scene, Modality.FLOW)
    inside = owner_map(scene) == 0
    assert np.all(flow[inside][:, :2] == 0.5)


def test_occlusion_smallest_z_wins_everywhere():
    near = _obj(z=0.3, class_id=1, p0=(7.0, 7.0), color=(0.1, 0.9, 0.1))
    far = _obj(z=0.7, class_id=2, p0=(9.0, 9.0), vel=(0.5, 0.0), color=(0.1, 0.1, 0.9))
    alone_near = SceneSpec(objects=(near,), extent=EXTENT)
    scene = SceneSpec(objects=(far, near), extent=EXTENT)
    own = owner_map(scene)
    overlap = owner_map(alone_near) == 0
    both = overlap & (owner_map(SceneSpec(objects=(far,), extent=EXTENT)) == 0)
    assert both.any()
    assert np.all(own[overlap] == 1)
    for m in (Modality.RGB, Modality.DEPTH, Modality.FLOW, Modality.SEGMENTATION):
        assert np.array_equal(render(scene, m)[both], render(alone_near, m)[both])


def test_keypoint_cross_and_parts_quadrants():
    scene = SceneSpec(objects=(_obj(class_id=3),), extent=EXTENT)
    kp = render(scene, "keypoints")
    lit = np.argwhere(kp[0].any(-1))
    assert sorted(map(tuple, lit)) == [(7, 8), (8, 7), (8, 8), (8, 9), (9, 8)]
    assert np.all(kp[0, 8, 8] == PALETTE[3])
    parts = render(scene, "parts")[0]
    assert np.all(parts[6, 6] == PART_COLORS[0]) and np.all(parts[6, 9] == PART_COLORS[1])
    assert np.all(parts[9, 6] == PART_COLORS[2]) and np.all(parts[9, 9] == PART_COLORS[3])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cross_modal_consistency(seed):
    scene = generate_scene(Rng(seed), "standard", EXTENT)
    grids = render_all(scene)
    assert grids.min() >= 0 and grids.max() <= 1
    own = owner_map(scene)
    seg, depth, flow = grids[Modality.SEGMENTATION], grids[Modality.DEPTH], grids[Modality.FLOW]
    by_class = {o.class_id: o for o in scene.objects}
    # Join: the palette colour at a pixel determines depth and flow exactly.
    for k, c in enumerate(PALETTE):
        mask = np.all(seg == c.astype(np.float32), axis=-1)
        if not mask.any():
            continue
        o = by_class[k]
        assert np.all(depth[mask] == np.float32(o.z))
        np.testing.assert_allclose(decode_flow(flow[mask][:, :2]), np.broadcast_to(o.vel, (mask.sum(), 2)), atol=1e-6)
    assert np.all((own >= 0) == seg.any(-1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_flow_advects_centres(seed):
    scene = generate_scene(Rng(seed), "standard", EXTENT)
    flow = render(scene, Modality.FLOW)
    own = owner_map(scene)
    for k, o in enumerate(scene.objects):
        for f in range(EXTENT[0] - 1):
            ch, cw = o.center(f)
            i, j = min(int(np.floor(ch + 0.5)), 15), min(int(np.floor(cw + 0.5)), 15)
            if own[f, i, j] != k:
                continue
            v = decode_flow(flow[f, i, j, :2])
            nxt = o.center(f + 1)
            assert abs(ch + v[0] - nxt[0]) < 0.5 and abs(cw + v[1] - nxt[1]) < 0.5


def test_render_reproducible_from_scene():
    ds = build_dataset(Rng(4), 6, "standard", EXTENT)
    for i in range(len(ds)):
        assert np.array_equal(render_all(ds.scenes[i]), ds.grids[i])


def test_caption_template_audit():
    ds = build_dataset(Rng(5), 1000, "standard", (2, 16, 16))
    words = set()
    for cap, scene in zip(ds.captions, ds.scenes):
        words.update(cap.split())
        assert cap.startswith("two objects") == (len(scene.objects) == 2)
    assert len(words) <= 12


def test_caption_direction():
    s = SceneSpec(objects=(_obj(vel=(0.0, 1.5)),), extent=EXTENT)
    assert caption(s) == "one object moving right"
    s = SceneSpec(objects=(_obj(vel=(-0.2, 0.0), p0=(10.0, 8.0)),), extent=EXTENT)
    assert caption(s) == "one object moving slowly up"


def test_groups_round_robin():
    assert build_dataset(Rng(0), 8, "easy", EXTENT).groups.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]


def test_dataset_roundtrip_bit_exact(tmp_path):
    ds = build_dataset(Rng(6), 9, "standard", EXTENT)
    manifest = write_dataset(ds, tmp_path / "d", samples_per_file=4)
    assert [s["id"] for s in manifest["samples"]] == list(range(9))
    back = read_dataset(tmp_path / "d")
    assert back.grids.tobytes() == ds.grids.tobytes()
    assert back.captions == ds.captions and back.scenes == ds.scenes
    assert back.groups.tolist() == ds.groups.tolist()


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.iterdir()):
        h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


def test_dataset_bytes_deterministic(tmp_path):
    make_dataset(Rng(7), 5, "standard", tmp_path / "a", EXTENT)
    make_dataset(Rng(7), 5, "standard", tmp_path / "b", EXTENT)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_read_missing_dataset(tmp_path):
    with pytest.raises(DataIOError):
        read_dataset(tmp_path / "nope")


def test_alignment_table():
    assert alignment_of("depth") is Alignment.PIXEL_ALIGNED
    assert alignment_of("segmentation") is Alignment.PIXEL_UNALIGNED
    assert alignment_of("parts") is Alignment.PIXEL_ALIGNED
    assert alignment_of("keypoints") is Alignment.PIXEL_UNALIGNED
    assert alignment_of("flow") is Alignment.PIXEL_ALIGNED
