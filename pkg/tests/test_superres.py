import numpy as np
import pytest

from varproreg import autodiff as ad, problems, superres as sr
from varproreg.errors import ContractError, FormatError
from varproreg.imaging import Grid, Image
from varproreg.optim import ProjectionPolicy

from conftest import central_diff, rel_err


def _near_truth(data, truth, t=0.5):
    w0 = data.identity_params()
    return w0 + t * (truth.w_true - w0)


def test_data_validation():
    g = Grid(4, 4)
    with pytest.raises(ContractError):
        sr.SuperResData([], 2)
    with pytest.raises(ContractError):
        sr.SuperResData([Image(g, np.zeros((4, 4))), Image(Grid(2, 2), np.zeros((2, 2)))], 2)
    d = sr.SuperResData([Image(g, np.zeros((4, 4)))] * 3, 2)
    assert d.fine.shape == (8, 8) and d.nparams == 12


def test_problem_shapes(sr_problem):
    data, truth = sr_problem
    assert data.fine.shape == (20, 20) and data.coarse.shape == (10, 10)
    assert len(data.templates) == 4 and data.nparams == 18
    op = sr.StackedOperator(data, data.identity_params())
    assert op.shape == (4 * 100 + 2 * 20 * 19, 400)


def test_identity_block_is_identity(tiny_sr):
    data, _ = tiny_sr
    blk = sr.build_interp_block(data.fine, np.array([1.0, 0, 0, 0, 1, 0]))
    x = np.random.default_rng(0).standard_normal(data.fine.n)
    np.testing.assert_allclose(blk.apply(x), x, atol=1e-12)


@pytest.mark.parametrize("which", ["block", "reg", "stacked"])
def test_adjoint_identities(tiny_sr, which):
    data, truth = tiny_sr
    rng = np.random.default_rng(1)
    n = data.fine.n
    if which == "block":
        A = sr.build_interp_block(data.fine, truth.w_true[:6])
        fwd, adj, m = A.apply, A.adjoint, n
    elif which == "reg":
        A = sr.GradRegularizer(data.fine)
        fwd, adj, m = A.apply, A.adjoint, A.rows
    else:
        A = sr.StackedOperator(data, _near_truth(data, truth), 0.7)
        fwd, adj, m = A.matvec, A.rmatvec, A.shape[0]
    x, y = rng.standard_normal(n), rng.standard_normal(m)
    assert abs(np.dot(fwd(x), y) - np.dot(x, adj(y))) < 1e-12 * max(1.0, abs(np.dot(x, adj(y))))
    np.testing.assert_allclose(ad.adjoint_apply(fwd, y, n), adj(y), rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(A.dense() @ x, fwd(x), rtol=1e-12, atol=1e-13)


def test_projection_matches_dense_solve(tiny_sr):
    data, truth = tiny_sr
    op = sr.StackedOperator(data, _near_truth(data, truth), 1.0)
    f = sr.project(op, sr.high_accuracy_policy(data.fine.n))
    A = op.dense()
    f_ref = np.linalg.solve(A.T @ A, A.T @ op.b)
    assert rel_err(f, f_ref) < 1e-8


def test_full_policy_jacobian_matches_fd(tiny_sr):
    data, truth = tiny_sr
    w = _near_truth(data, truth)
    obj = sr.VarproObjective(data, ProjectionPolicy.full(200), 1.0)
    J = obj.jacobian(w)
    fd = central_diff(obj.residual, w, 1e-6)
    assert rel_err(J, fd) < 1e-5


def test_none_policy_keeps_only_operator_derivative(tiny_sr):
    data, truth = tiny_sr
    w = _near_truth(data, truth)
    pol = ProjectionPolicy.none(200)
    f = np.asarray(sr.project(sr.StackedOperator(data, w, 1.0), pol))
    J_none = sr.VarproObjective(data, pol, 1.0).jacobian(w)
    J_op = ad.jacobian(lambda v: sr.StackedOperator(data, v, 1.0).matvec(f), w)
    np.testing.assert_allclose(J_none, J_op, rtol=1e-10, atol=1e-13)


def test_residual_value_independent_of_policy(tiny_sr):
    data, truth = tiny_sr
    w = _near_truth(data, truth)
    vals = [sr.VarproObjective(data, p, 1.0).residual(w)
            for p in (ProjectionPolicy.none(30), ProjectionPolicy.full(30), ProjectionPolicy.last_fraction(0.5, 30))]
    for v in vals[1:]:
        np.testing.assert_array_equal(v, vals[0])


def test_truth_has_small_loss(tiny_sr):
    data, truth = tiny_sr
    obj = sr.VarproObjective(data, ProjectionPolicy.none(200), 0.1)
    assert obj.loss(truth.w_true) < 0.05 * obj.loss(data.identity_params())


def test_gauss_newton_reduces_loss(tiny_sr):
    data, truth = tiny_sr
    w, f, tr = sr.varpro_gauss_newton(data, ProjectionPolicy.full(100), gn_iters=5, lam_f=1.0,
                                      f_true=truth.f_true.intensities)
    assert tr.accepted_losses[-1] < tr.accepted_losses[0]
    assert tr.records[0]["rel_loss"] == 1.0
    assert tr.final_recon_error is not None and f.shape == (data.fine.n,)


def test_wrong_parameter_count(tiny_sr):
    data, _ = tiny_sr
    with pytest.raises(ContractError):
        sr.StackedOperator(data, np.zeros(5))
    with pytest.raises(ContractError):
        sr.StackedOperator(data, data.identity_params(), -1.0)


def test_reconstruction_error_contract():
    assert sr.relative_reconstruction_error(np.ones(4), np.ones(4)) == 0.0
    with pytest.raises(ContractError):
        sr.relative_reconstruction_error(np.ones(4), np.zeros(4))


def test_random_transforms_are_seeded():
    a, b = sr.random_transforms(3, 5), sr.random_transforms(3, 5)
    np.testing.assert_array_equal(a, b)
    assert a.size == 18


def test_bundle_roundtrip(tmp_path, tiny_sr):
    data, truth = tiny_sr
    sr.save_bundle(tmp_path / "b", data, truth, seed=0)
    back, t2, manifest = sr.load_bundle(tmp_path / "b")
    assert manifest["seed"] == 0 and back.k == data.k
    for a, b in zip(back.templates, data.templates):
        span = np.ptp(b.data)
        np.testing.assert_allclose(a.data, b.data, atol=span / 65535 + 1e-12)
    np.testing.assert_array_equal(t2.w_true, truth.w_true)


def test_bad_bundle(tmp_path):
    (tmp_path / "manifest.json").write_text("{}")
    with pytest.raises(FormatError):
        sr.load_bundle(tmp_path)


def test_warm_start_reaches_same_projection(tiny_sr):
    data, truth = tiny_sr
    w = _near_truth(data, truth)
    pol = ProjectionPolicy.none(300)
    cold = sr.VarproObjective(data, pol, 1.0)
    warm = sr.VarproObjective(data, pol, 1.0, warm_start=True)
    warm.residual(data.identity_params())
    np.testing.assert_allclose(warm.residual(w), cold.residual(w), rtol=1e-8, atol=1e-12)


def test_final_record_skips_rejected():
    recs = [{"accepted": True, "loss": 3.0}, {"accepted": True, "loss": 2.0}, {"accepted": False, "loss": 5.0}]
    assert sr.final_record(recs)["loss"] == 2.0


def test_stacked_dense_blocks(tiny_sr):
    data, truth = tiny_sr
    op = sr.StackedOperator(data, truth.w_true, 2.0)
    A = op.dense()
    m = data.coarse.n
    np.testing.assert_allclose(A[:m], op.sd * data.pool_op.dense(), rtol=1e-14)
    np.testing.assert_allclose(A[op.m_data:], op.sf * sr.GradRegularizer(data.fine).dense(), rtol=1e-14)
    f = truth.f_true.intensities
    # the generated data are exactly the pooled warps of the truth
    np.testing.assert_allclose(A[:op.m_data] @ f, op.b[:op.m_data], atol=1e-12)
