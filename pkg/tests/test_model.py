import numpy as np
import pytest
import torch
from torch import nn

from ctxbias.model import (CheckpointError, ModelState, MultiLabelNet, cams, compute_cam,
                           feature_split_forward, forward_scores, load_checkpoint,
                           normalize_cam, save_checkpoint, split_head, update_xs_history)

from oracles import cam_oracle


def _head(d, m, seed=0, bias=True):
    torch.manual_seed(seed)
    return nn.Linear(d, m, bias=bias).double()


def test_forward_identity():
    head = _head(4, 4, bias=False)
    with torch.no_grad():
        head.weight.copy_(torch.eye(4, dtype=torch.float64))
    for k in range(4):
        e = torch.zeros(4, dtype=torch.float64)
        e[k] = 1
        assert torch.equal(forward_scores(e, head), e)


def test_forward_matches_double_loop(rng):
    head = _head(7, 5)
    x = torch.from_numpy(rng.normal(size=(3, 7)))
    out = forward_scores(x, head)
    w, b = head.weight.detach().numpy(), head.bias.detach().numpy()
    for i in range(3):
        for r in range(5):
            ref = b[r] + sum(w[r, d] * x[i, d].item() for d in range(7))
            assert abs(out[i, r].item() - ref) < 1e-10


def test_forward_zero_input():
    head = _head(5, 3)
    z = torch.zeros(5, dtype=torch.float64)
    assert torch.equal(forward_scores(z, head), head.bias.detach())
    assert torch.equal(forward_scores(z, head, use_bias=False), torch.zeros(3, dtype=torch.float64))


def test_forward_dim_mismatch():
    with pytest.raises(ValueError):
        forward_scores(torch.zeros(3), _head(4, 2).float())


def test_middle_split_rows():
    s = split_head(nn.Linear(2048, 3), "middle")
    assert s.d_o == 1024 and s.o_rows.tolist() == list(range(1024))
    assert s.w_o().shape == (1024, 3) and s.w_s().shape == (1024, 3)


def test_random_split_reproducible():
    a = split_head(nn.Linear(4, 2), "random", d_o=1, seed=11)
    b = split_head(nn.Linear(4, 2), "random", d_o=1, seed=11)
    assert a.o_rows.tolist() == b.o_rows.tolist() and len(a.o_rows) == 1


def test_split_bad_sizes():
    for d_o in (0, 4):
        with pytest.raises(ValueError):
            split_head(nn.Linear(4, 2), d_o=d_o)


@pytest.mark.parametrize("mode, d_o", [("middle", None), ("random", 3), ("random", 7)])
def test_split_recombines_to_full_head(rng, mode, d_o):
    head = _head(8, 4)
    s = split_head(head, mode, d_o, seed=2)
    x = torch.from_numpy(rng.normal(size=(100, 8)))
    assert torch.allclose(s.split_scores(x), head(x), rtol=0, atol=1e-10)


def test_substitution_identity_and_zero_cases(rng):
    head = _head(6, 3)
    s = split_head(head)
    x = torch.from_numpy(rng.normal(size=(1, 6)))
    s.xs_bar = x[0, s.s_rows].clone()
    plain, sub = feature_split_forward(x, s)
    assert torch.allclose(plain, sub, rtol=0, atol=1e-12)
    x0 = x.clone()
    x0[:, s.s_rows] = 0
    s.xs_bar = torch.zeros(3, dtype=torch.float64)
    plain, sub = feature_split_forward(x0, s)
    ref = x0[:, s.o_rows] @ s.w_o() + head.bias
    assert torch.equal(plain, sub) and torch.allclose(sub, ref, rtol=0, atol=1e-12)


def test_substitution_matches_concatenation(rng):
    head = _head(10, 4)
    s = split_head(head, "random", d_o=4, seed=5)
    s.xs_bar = torch.from_numpy(rng.normal(size=6))
    x = torch.from_numpy(rng.normal(size=(16, 10)))
    _, sub = feature_split_forward(x, s)
    z = x.clone()
    z[:, s.s_rows] = s.xs_bar
    assert torch.allclose(sub, head(z), rtol=0, atol=1e-10)


def test_substituted_path_blocks_ws_gradient(rng):
    head = _head(6, 3)
    s = split_head(head)
    s.xs_bar = torch.from_numpy(rng.normal(size=3))
    x = torch.from_numpy(rng.normal(size=(5, 6)))
    s.substituted_scores(x).sum().backward()
    assert torch.count_nonzero(head.weight.grad[:, s.s_rows]) == 0
    assert torch.count_nonzero(head.weight.grad[:, s.o_rows]) > 0


def test_xs_history():
    s = split_head(nn.Linear(4, 2).double(), history=10)
    assert torch.equal(s.xs_bar, torch.zeros(2, dtype=torch.float64))
    v = torch.tensor([1.0, -2.0], dtype=torch.float64)
    assert torch.equal(update_xs_history(s, v), v)
    pushes = [torch.full((2,), float(k), dtype=torch.float64) for k in range(1, 12)]
    s = split_head(nn.Linear(4, 2).double(), history=10)
    for p in pushes:
        update_xs_history(s, p)
    # the first push (value 1) has been evicted: mean of 2..11
    assert torch.allclose(s.xs_bar, torch.full((2,), 6.5, dtype=torch.float64))


def test_xs_history_mean_oracle(rng):
    s = split_head(nn.Linear(8, 2).double())
    vals = [rng.normal(size=4) for _ in range(10)]
    for v in vals:
        update_xs_history(s, torch.from_numpy(v))
    ref = [sum(v[j] for v in vals) / 10 for j in range(4)]
    assert np.allclose(s.xs_bar.numpy(), ref, rtol=0, atol=1e-12)


def test_constant_cam_normalizes_to_zero():
    f = torch.ones(3, 5, 5, dtype=torch.float64)
    cam = compute_cam(f, _head(3, 2), 1)
    assert torch.equal(cam, torch.zeros(5, 5, dtype=torch.float64))


def test_single_channel_cam_is_proportional(rng):
    head = _head(3, 2)
    with torch.no_grad():
        head.weight.zero_()
        head.weight[1, 2] = 1.0
    f = torch.zeros(3, 4, 4, dtype=torch.float64)
    f[2] = torch.from_numpy(rng.random((4, 4)))
    assert torch.equal(compute_cam(f, head, 1, normalize=False), f[2])
    ref = (f[2] - f[2].min()) / (f[2].max() - f[2].min())
    assert torch.allclose(compute_cam(f, head, 1), ref, rtol=0, atol=1e-12)


def test_cam_triple_loop_oracle(rng):
    head = _head(6, 4)
    f = torch.from_numpy(rng.normal(size=(6, 5, 3)))
    w = head.weight.detach().tolist()
    for r in range(4):
        got = compute_cam(f, head, r, normalize=False)
        ref = torch.tensor(cam_oracle(f.tolist(), w, r), dtype=torch.float64)
        assert torch.allclose(got, ref, rtol=0, atol=1e-8)


def test_batched_cams_with_row_subset(rng):
    w = torch.from_numpy(rng.normal(size=(3, 6)))
    f = torch.from_numpy(rng.normal(size=(2, 6, 4, 4)))
    rows = torch.tensor([0, 2, 5])
    out = cams(f, w, [2, 0], normalize=False, rows=rows)
    ref = torch.einsum("d,bdhw->bhw", w[2, rows], f[:, rows])
    assert out.shape == (2, 2, 4, 4) and torch.allclose(out[:, 0], ref, atol=1e-12)


def test_normalize_range(rng):
    x = torch.from_numpy(rng.normal(size=(3, 2, 5, 5)))
    n = normalize_cam(x)
    flat = n.flatten(2)
    assert torch.all(flat.min(-1).values == 0) and torch.allclose(flat.max(-1).values,
                                                                  torch.ones(3, 2, dtype=x.dtype))


def test_cam_category_out_of_range():
    with pytest.raises(ValueError):
        compute_cam(torch.zeros(3, 2, 2), nn.Linear(3, 2), 5)


def _net(seed=0):
    torch.manual_seed(seed)
    return MultiLabelNet(3, "small", 8, widths=(4, 4, 4))


def test_checkpoint_round_trip(tmp_path):
    net = _net().eval()
    split = split_head(net.fc, "random", d_o=3, seed=1)
    split.update_xs_history(torch.arange(5, dtype=torch.float32))
    save_checkpoint(ModelState(net, split, None, 4, 9, {"method": "x"}), tmp_path / "a.pt")
    st = load_checkpoint(tmp_path / "a.pt")
    x = torch.randn(2, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(net(x), st.model.eval()(x))
    assert st.split.o_rows.tolist() == split.o_rows.tolist()
    assert torch.equal(st.split.xs_bar, split.xs_bar)
    assert (st.epoch, st.seed, st.meta) == (4, 9, {"method": "x"})
    save_checkpoint(st, tmp_path / "b.pt")
    assert (tmp_path / "a.pt").read_bytes() == (tmp_path / "b.pt").read_bytes()


def test_checkpoint_mismatch(tmp_path):
    save_checkpoint(ModelState(_net()), tmp_path / "a.pt")
    with pytest.raises(CheckpointError, match="feature dim"):
        load_checkpoint(tmp_path / "a.pt", expected_feature_dim=16)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.pt", expected_categories=5)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")


def test_feature_map_geometry():
    net = _net()
    out = net.extract(torch.zeros(2, 3, 32, 32))
    assert out.feature_map.shape == (2, 8, 8, 8) and out.pooled.shape == (2, 8)
    assert net.arch["num_categories"] == 3 and net.feature_dim == 8
