"""Network assembly: shapes, freezing, determinism, checkpoints, providers."""

import numpy as np
import pytest

import deformseg.ops as ops
from deformseg import losses
from deformseg.checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from deformseg.config import ModelConfig
from deformseg.errors import DataError
from deformseg.model import FileFeatureProvider, FrozenRandomProvider, SegModel
from deformseg.tensor import Tensor, backward, no_grad


def desk_model(**kw):
    return SegModel(ModelConfig.desk(**kw))


def desk_images(rng, n=1, size=128):
    return rng.normal(size=(n, 3, size, size)).astype(np.float32)


# -- providers -----------------------------------------------------------------

def test_frozen_provider_shape_and_determinism(rng):
    prov = FrozenRandomProvider(embed=32, stride=16, seed=5)
    img = desk_images(rng)
    a = prov.features(img)
    b = prov.features(img)
    assert a.shape == (1, 32, 8, 8)
    assert np.array_equal(a.data, b.data)      # bitwise identical across calls
    assert not a.requires_grad


def test_frozen_provider_seed_changes_features(rng):
    img = desk_images(rng)
    a = FrozenRandomProvider(32, 16, seed=1).features(img)
    b = FrozenRandomProvider(32, 16, seed=2).features(img)
    assert not np.array_equal(a.data, b.data)


def test_file_provider_round_trip(tmp_path, rng):
    feats = rng.normal(size=(32, 8, 8)).astype(np.float32)
    np.save(tmp_path / "sample_a.npy", feats)
    prov = FileFeatureProvider(str(tmp_path), embed=32, stride=16)
    out = prov.features(desk_images(rng), ids=["sample_a"])
    assert np.allclose(out.data, feats)


def test_file_provider_errors(tmp_path, rng):
    prov = FileFeatureProvider(str(tmp_path), embed=32, stride=16)
    img = desk_images(rng)
    with pytest.raises(DataError, match="ids"):
        prov.features(img)
    with pytest.raises(DataError, match="missing"):
        prov.features(img, ids=["nope"])
    np.save(tmp_path / "bad.npy", np.zeros((16, 8, 8), dtype=np.float32))
    with pytest.raises(DataError, match="shape"):
        prov.features(img, ids=["bad"])


# -- backbone ------------------------------------------------------------------

def test_local_features_strides_and_channels(rng):
    model = desk_model()
    feats = model.backbone(Tensor(desk_images(rng)))
    shapes = [f.shape for f in feats]
    assert shapes == [(1, 32, 32, 32), (1, 64, 16, 16), (1, 128, 8, 8), (1, 256, 4, 4)]


def test_backbone_gradients_reach_first_layer(rng):
    model = desk_model()
    feats = model.backbone(Tensor(desk_images(rng)))
    loss = feats[0].sum() + feats[1].sum() + feats[2].sum() + feats[3].sum()
    backward(loss)
    first = model.backbone.stem1.conv.w
    assert first.grad is not None and np.abs(first.grad).max() > 0


# -- decoder stage ----------------------------------------------------------------

def test_decoder_stage_widths_desk():
    model = desk_model()
    widths = [(s.deform.w.shape[1], s.deform.w.shape[0]) for s in model.decoder]
    assert widths == [(128, 32), (32, 16), (16, 8)]
    assert [s.groups for s in model.decoder] == [32, 16, 8]


def test_decoder_stage_matches_composed_reference(f64, rng):
    model = SegModel(ModelConfig.desk(init_seed=3))
    stage = model.decoder[1]
    x = Tensor(rng.normal(size=(1, 32, 8, 8)))
    got = stage(x, training=False)          # dropout off, fresh zero-init predictor
    conv = ops.conv2d(x, stage.deform.w, None, stride=1, padding=1)
    pre = 0.5 * conv.data + stage.deform.b.data.reshape(1, -1, 1, 1)
    ref = ops.gelu(ops.group_norm(Tensor(pre), Tensor(stage.gamma.data),
                                  Tensor(stage.beta.data), stage.groups))
    assert np.allclose(got.data, ref.data, atol=1e-6)


# -- forward -----------------------------------------------------------------------

def test_forward_desk_logit_shape(rng):
    model = desk_model()
    logits = model.forward(desk_images(rng, 2))
    assert logits.shape == (2, 6, 128, 128)


def test_forward_trace_desk(rng):
    model = desk_model()
    trace = {}
    model.forward(desk_images(rng), trace=trace)
    assert trace["global"] == (1, 32, 8, 8)
    assert trace["concat"] == (1, 128, 8, 8)
    assert trace["decoder1"] == (1, 32, 8, 8)
    assert trace["decoder2"] == (1, 16, 8, 8)
    assert trace["decoder3"] == (1, 8, 8, 8)
    assert trace["head"] == (1, 6, 8, 8)
    assert trace["logits"] == (1, 6, 128, 128)


def test_eval_forward_is_bitwise_deterministic(rng):
    model = desk_model()
    img = desk_images(rng)
    with no_grad():
        a = model.forward(img, training=False).data
        b = model.forward(img, training=False).data
    assert np.array_equal(a, b)


def test_training_forward_requires_rng(rng):
    model = desk_model()
    with pytest.raises(ValueError, match="rng"):
        model.forward(desk_images(rng), training=True)


def test_forward_rejects_bad_extents(rng):
    model = desk_model()
    with pytest.raises(ValueError, match="divisible"):
        model.forward(rng.normal(size=(1, 3, 100, 100)))


def test_frozen_provider_gets_no_gradient_all_others_do(rng):
    model = desk_model()
    img = desk_images(rng)
    labels = np.random.default_rng(0).integers(0, 6, size=(1, 128, 128))
    logits = model.forward(img, training=False)
    backward(losses.composite_loss(logits, labels).total)
    for name, p in model.provider.named_parameters():
        assert p.grad is None, name
    for name, p in model.named_parameters():
        if p.requires_grad:
            assert p.grad is not None, name


def test_parameter_groups_partition(rng):
    model = desk_model()
    backbone, rest = model.parameter_groups()
    ids = {id(p) for p in backbone} | {id(p) for p in rest}
    assert len(ids) == len(backbone) + len(rest) == len(model.trainable_parameters())


def test_upsampled_argmax_commutes_on_large_blocks():
    # piecewise-constant grid logits: left half favors class 0, right class 2
    grid = np.zeros((1, 3, 8, 8))
    grid[0, 0, :, :4] = 5.0
    grid[0, 2, :, 4:] = 5.0
    up = ops.bilinear_resize(Tensor(grid), 128, 128)
    pred = np.argmax(up.data, axis=1)[0]
    assert (pred[:, :48] == 0).all()       # away from the 16-pixel seam
    assert (pred[:, 80:] == 2).all()


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_binary_round_trip(tmp_path, rng):
    tensors = {
        "a.w": rng.normal(size=(2, 3)).astype(np.float32),
        "b.scalar": np.array(2.5, dtype=np.float32),
    }
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, tensors, config_echo="model.num_classes = 6\n")
    back, echo = load_checkpoint(path)
    assert list(back) == ["a.w", "b.scalar"]
    assert np.array_equal(back["a.w"], tensors["a.w"])
    assert back["b.scalar"].shape == ()
    assert echo == "model.num_classes = 6\n"


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(path)


def test_model_checkpoint_round_trip_bitwise(tmp_path, rng):
    model = desk_model()
    img = desk_images(rng)
    path = tmp_path / "model.ckpt"
    save_model(path, model)
    clone, bundle = load_model(path)
    assert bundle.model == model.cfg
    for (na, pa), (nb, pb) in zip(model.named_parameters(), clone.named_parameters()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data), na
    with no_grad():
        a = model.forward(img).data
        b = clone.forward(img).data
    assert np.array_equal(a, b)


def test_checkpoint_asserts_concat_scale_order(tmp_path):
    """The archive's name order pins the documented fusion-scale concat order."""
    model = desk_model()
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    names = list(load_checkpoint(path)[0])
    fusion_positions = [names.index(f"fusion.{i}.proj_w") for i in range(4)]
    assert fusion_positions == sorted(fusion_positions)
    # scale i projects the backbone's stage-i channel count
    in_ch = [model.fusion[i].proj_w.shape[1] for i in range(4)]
    assert in_ch == [32, 64, 128, 256]


def test_checkpoint_name_mismatch_raises(tmp_path):
    model = desk_model()
    arrays = model.state_arrays()
    arrays.pop(next(iter(arrays)))
    from deformseg.config import ConfigBundle, TrainConfig, SceneConfig
    from deformseg.config import serialize_config
    echo = serialize_config(ConfigBundle(model.cfg, TrainConfig(), SceneConfig()))
    path = tmp_path / "bad.ckpt"
    save_checkpoint(path, arrays, echo)
    with pytest.raises(DataError, match="mismatch"):
        load_model(path)
