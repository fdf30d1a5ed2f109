"""Network assembly, shape law, determinism, serialization, gradients."""

import numpy as np
import pytest

from sineseg.gradcheck import check_network_gradients
from sineseg.network import (NetworkConfig, build_network, load_network,
                             paper_config, save_network, toy_config)


def enumerate_expected_shapes(cfg):
    """Independent walk of the architecture, listing every parameter shape."""
    shapes = []
    k = tuple(cfg.kernel)
    in_ch = cfg.in_channels
    for i in range(cfg.n_stages):
        f = cfg.features[i]
        for b in range(cfg.blocks_per_stage[i]):
            stride = cfg.strides[i] if b == 0 else (1, 1, 1)
            shapes.append((f, in_ch) + k)          # conv1 (no bias before norm)
            shapes.extend([(f,), (f,)])            # norm1 scale/shift
            shapes.append((f, f) + k)              # conv2
            shapes.extend([(f,), (f,)])            # norm2
            if in_ch != f or stride != (1, 1, 1):
                shapes.append((f, in_ch, 1, 1, 1))  # projection
                shapes.append((f,))
            in_ch = f
        if cfg.context_block == "ssm_stub" and i >= 1:
            shapes.extend([(f,), (f,), (f,)])      # lam_raw, beta, gamma
    for s in range(cfg.n_stages - 1, 0, -1):
        f_lo, f_hi = cfg.features[s - 1], cfg.features[s]
        shapes.append((f_hi, f_lo) + tuple(cfg.strides[s]))  # upsample weight
        shapes.append((f_lo,))
        shapes.append((f_lo, 2 * f_lo) + k)        # decoder conv (no bias)
        shapes.extend([(f_lo,), (f_lo,)])
    n_heads = cfg.ds_heads if cfg.deep_supervision else 1
    for j in range(n_heads):
        shapes.append((cfg.out_classes, cfg.features[j], 1, 1, 1))
        shapes.append((cfg.out_classes,))
    return shapes


class TestBuild:
    def test_parameter_count_matches_shape_enumeration(self):
        cfg = toy_config()
        net = build_network(cfg)
        expected = sum(int(np.prod(s)) for s in enumerate_expected_shapes(cfg))
        assert net.n_parameters() == expected

    def test_parameter_count_without_context(self):
        cfg = toy_config(context_block="none")
        net = build_network(cfg)
        expected = sum(int(np.prod(s)) for s in enumerate_expected_shapes(cfg))
        assert net.n_parameters() == expected

    def test_deterministic_for_seed(self):
        a = build_network(toy_config(seed=9))
        b = build_network(toy_config(seed=9))
        for (na, pa), (nb, pb) in zip(a.named_parameters().items(),
                                      b.named_parameters().items()):
            assert na == nb
            assert pa.tobytes() == pb.tobytes()

    def test_seed_changes_parameters(self):
        a = build_network(toy_config(seed=1))
        b = build_network(toy_config(seed=2))
        assert a.named_parameters()["encoder.0.0.conv1.weight"].tobytes() \
            != b.named_parameters()["encoder.0.0.conv1.weight"].tobytes()

    def test_init_statistics(self):
        net = build_network(toy_config(seed=0))
        params = net.named_parameters()
        assert np.all(params["encoder.0.0.norm1.scale"] == 1.0)
        assert np.all(params["encoder.0.0.norm1.shift"] == 0.0)
        assert np.all(params["head.0.bias"] == 0.0)

    def test_invalid_configs(self):
        with pytest.raises(ValueError, match="non-decreasing"):
            toy_config(features=(32, 16, 8))
        with pytest.raises(ValueError, match="stage 0"):
            toy_config(strides=((2, 2, 2), (2, 2, 2), (2, 2, 2)))
        with pytest.raises(ValueError, match="ds_heads"):
            toy_config(ds_heads=3)
        with pytest.raises(ValueError, match="n_stages"):
            NetworkConfig(n_stages=4, features=(8, 16), blocks_per_stage=(1, 1),
                          strides=((1, 1, 1), (2, 2, 2)))


class TestPaperConfiguration:
    def test_published_constants(self):
        cfg = paper_config()
        assert cfg.n_stages == 6
        assert cfg.features == (32, 64, 128, 256, 320, 320)
        assert cfg.blocks_per_stage == (1, 3, 4, 6, 6, 6)
        assert cfg.kernel == (3, 3, 3)
        assert cfg.deep_supervision
        assert cfg.in_channels == 4
        assert cfg.out_classes == 2

    def test_patch_divides_cumulative_strides(self):
        cfg = paper_config()
        cum = cfg.cumulative_strides()
        assert cum[-1] == (16, 32, 32)
        for axis in range(3):
            assert (112, 160, 128)[axis] % cum[-1][axis] == 0

    def test_encoder_structure(self):
        net = build_network(paper_config())
        assert [len(stage) for stage in net.encoder] == [1, 3, 4, 6, 6, 6]
        assert net.context[0] is None
        assert all(net.context[i] is not None for i in range(1, 6))

    def test_full_architecture_forward_at_reduced_dims(self):
        # the full-size patch is out of desk-scale memory; the stride
        # arithmetic is identical at this proportional input
        net = build_network(paper_config())
        x = np.zeros((4, 16, 32, 32), dtype=np.float32)
        heads = net.forward(x, train=False)
        assert len(heads) == 4
        assert heads[0].shape == (2, 16, 32, 32)
        assert heads[1].shape == (2, 8, 16, 16)
        assert heads[3].shape == (2, 2, 4, 4)

    def test_paper_patch_head_dims_by_stride_arithmetic(self):
        cfg = paper_config()
        patch = (112, 160, 128)
        dims = [tuple(p // c for p, c in zip(patch, cum))
                for cum in cfg.cumulative_strides()[:cfg.n_heads]]
        assert dims[0] == (112, 160, 128)
        assert dims[1] == (56, 80, 64)
        assert dims[3] == (14, 20, 16)


class TestForward:
    def test_head_shapes_toy(self, rng):
        cfg = toy_config(n_stages=4, features=(8, 16, 32, 32),
                         blocks_per_stage=(1, 1, 1, 1),
                         strides=((1, 1, 1),) + ((2, 2, 2),) * 3, ds_heads=3)
        net = build_network(cfg)
        heads = net.forward(rng.standard_normal((4, 32, 32, 32)).astype(np.float32),
                            train=False)
        assert [h.shape for h in heads] == [(2, 32, 32, 32), (2, 16, 16, 16),
                                            (2, 8, 8, 8)]

    def test_shape_law_random_configs(self, rng):
        for _ in range(8):
            n = int(rng.integers(2, 5))
            feats = np.sort(rng.integers(2, 9, n)).tolist()
            strides = [(1, 1, 1)] + [tuple(int(s) for s in rng.integers(1, 3, 3))
                                     for _ in range(n - 1)]
            cfg = NetworkConfig(
                n_stages=n, features=tuple(feats), kernel=(3, 3, 3),
                blocks_per_stage=tuple(int(b) for b in rng.integers(1, 3, n)),
                strides=tuple(strides), ds_heads=int(rng.integers(1, n)),
                context_block=str(rng.choice(["none", "ssm_stub"])),
                in_channels=2, out_classes=2, seed=int(rng.integers(100)))
            cum = cfg.cumulative_strides()
            dims = tuple(int(c * rng.integers(1, 3)) * 2 for c in cum[-1])
            net = build_network(cfg)
            heads = net.forward(
                rng.standard_normal((2,) + dims).astype(np.float32), train=False)
            for head, c in zip(heads, cum):
                assert head.shape == (2,) + tuple(d // s for d, s in zip(dims, c))

    def test_zero_parameters_zero_heads(self, rng):
        net = build_network(toy_config())
        for arr in net.named_parameters().values():
            arr[...] = 0.0
        heads = net.forward(rng.standard_normal((4, 8, 8, 8)).astype(np.float32),
                            train=False)
        for h in heads:
            np.testing.assert_array_equal(h, 0.0)

    def test_deterministic_forward(self, rng):
        x = rng.standard_normal((4, 8, 8, 8)).astype(np.float32)
        a = build_network(toy_config(seed=5)).forward(x, train=False)
        b = build_network(toy_config(seed=5)).forward(x, train=False)
        for ha, hb in zip(a, b):
            assert ha.tobytes() == hb.tobytes()

    def test_indivisible_dims_rejected(self, rng):
        net = build_network(toy_config())
        with pytest.raises(ValueError, match="divisible"):
            net.forward(np.zeros((4, 6, 8, 8), dtype=np.float32))

    def test_channel_mismatch_rejected(self):
        net = build_network(toy_config())
        with pytest.raises(ValueError, match="channels"):
            net.forward(np.zeros((3, 8, 8, 8), dtype=np.float32))


class TestBackward:
    def test_zero_upstream_zero_grads(self, rng):
        net = build_network(toy_config(), dtype=np.float64)
        heads = net.forward(rng.standard_normal((4, 8, 8, 8)))
        grads, gx = net.backward([np.zeros_like(h) for h in heads])
        assert all(np.all(g == 0.0) for g in grads.values())
        np.testing.assert_array_equal(gx, 0.0)

    def test_gradients_match_finite_differences(self):
        worst, tol = check_network_gradients(seed=0, n_probes=20)
        assert worst < tol


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        net = build_network(toy_config(seed=11))
        path = tmp_path / "model.ckpt"
        save_network(net, path)
        back = load_network(path)
        assert back.config == net.config
        for name, arr in net.named_parameters().items():
            assert back.named_parameters()[name].tobytes() == arr.tobytes()
        x = rng.standard_normal((4, 8, 8, 8)).astype(np.float32)
        for ha, hb in zip(net.forward(x, train=False), back.forward(x, train=False)):
            assert ha.tobytes() == hb.tobytes()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="magic"):
            load_network(path)
