import numpy as np
import pytest

from cslab.gan import ArraySource, write_trace_csv
from cslab.ldm import LdmTrainConfig, _objective, ldm_objective, train_ldm
from cslab.models import init_ldm_bundle
from cslab.numcore import finite_diff_jacobian


def batches(n_domains=2, rows=12, d=5, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((rows, d)) + k for k in range(n_domains)]


def test_all_weights_zero_gives_zero():
    b = init_ldm_bundle(5, 2, 2, 2, hidden=[8], seed=0)
    cfg = LdmTrainConfig(weight_dm=0, lam_indep=0, weight_recon=0, lam_sparse=0)
    assert ldm_objective(b, batches(), cfg)[0] == 0.0


def test_single_domain_has_no_pairwise_term():
    b = init_ldm_bundle(5, 2, 2, 1, hidden=[8], seed=0)
    total, comp = ldm_objective(b, batches(1), LdmTrainConfig())
    assert comp["dm"] == 0.0 and total > 0


@pytest.mark.parametrize("dm", ["mmd", "adversarial"])
def test_total_is_weighted_sum_of_standalone_terms(dm):
    b = init_ldm_bundle(5, 2, 2, 3, hidden=[8], seed=1)
    bs = batches(3)
    cfg = LdmTrainConfig(weight_dm=0.7, lam_indep=1.3, weight_recon=0.4, lam_sparse=0.2, dm=dm)
    total, comp = ldm_objective(b, bs, cfg)
    parts = {}
    for name, w in (("dm", "weight_dm"), ("indep", "lam_indep"), ("recon", "weight_recon"), ("sparse", "lam_sparse")):
        only = LdmTrainConfig(**{k: (1.0 if k == w else 0.0) for k in ("weight_dm", "lam_indep", "weight_recon",
                                                                        "lam_sparse")}, dm=dm)
        parts[name] = ldm_objective(b, bs, only)[0]
        assert abs(parts[name] - comp[name]) < 1e-12
    expect = 0.7 * parts["dm"] + 1.3 * parts["indep"] + 0.4 * parts["recon"] + 0.2 * parts["sparse"]
    assert abs(total - expect) < 1e-10
    assert comp["indep"] >= 0 and comp["recon"] >= 0 and comp["sparse"] >= 0


@pytest.mark.parametrize("p", [1.0, 0.5])
def test_objective_gradient(p):
    b = init_ldm_bundle(4, 2, 2, 2, hidden=[6], seed=2)
    bs = batches(2, 8, 4)
    cfg = LdmTrainConfig(lam_sparse=0.3, p=p, content_width=1.2, style_width=0.8)
    _, _, grads = _objective(b, bs, cfg, True)
    arrays = b.model_arrays()
    for k in range(len(arrays)):
        def f(v, k=k):
            arrs = [a.copy() for a in arrays]
            arrs[k] = v.reshape(arrays[k].shape)
            return np.array([_objective(b.with_model_arrays(arrs), bs, cfg, False)[0]])
        fd = finite_diff_jacobian(f, arrays[k].ravel(), 1e-6)[0]
        an = grads[k].ravel()
        assert np.max(np.abs(fd - an) / np.maximum(1e-6, np.abs(fd) + np.abs(an))) < 1e-4


def test_mmd_term_near_zero_at_null():
    b = init_ldm_bundle(5, 2, 2, 2, hidden=[8], seed=3)
    rng = np.random.default_rng(9)
    # the unbiased estimator fluctuates around zero at scale ~1/rows
    same = rng.standard_normal((3000, 5))
    comp = ldm_objective(b, [same[:1500], same[1500:]], LdmTrainConfig())[1]
    assert comp["dm"] >= -1e-3


def test_nonfinite_term_is_named():
    b = init_ldm_bundle(5, 2, 2, 2, hidden=[8], seed=0)
    bs = batches()
    bs[0][0, 0] = np.inf
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError, match="term"):
        ldm_objective(b, bs, LdmTrainConfig(weight_dm=0, lam_indep=0))


def test_config_validation():
    for bad in (dict(weight_dm=-1), dict(dm="wasserstein"), dict(batch=2), dict(content_width=0.0)):
        with pytest.raises(ValueError):
            LdmTrainConfig(**bad).validate()
    cfg = LdmTrainConfig(hidden=(4,))
    assert LdmTrainConfig.from_dict(cfg.to_dict()) == cfg


def shifted_source():
    return ArraySource([lambda rng, k, m=m: rng.standard_normal((k, 3)) + [m, 0, 0] for m in (0.0, 1.0)], 3)


def test_zero_steps_and_determinism(tmp_path):
    init = init_ldm_bundle(3, 1, 1, 2, seed=0)
    out, trace = train_ldm(shifted_source(), LdmTrainConfig(steps=0, d_c_hat=1, d_s_hat=1), bundle=init)
    assert out is init and trace == []
    cfg = LdmTrainConfig(steps=40, eval_every=20, batch=16, d_c_hat=1, d_s_hat=1, seed=2, eval_samples=50)
    for k in range(2):
        write_trace_csv(tmp_path / f"{k}.csv", train_ldm(shifted_source(), cfg)[1])
    assert (tmp_path / "0.csv").read_bytes() == (tmp_path / "1.csv").read_bytes()


def test_adversarial_mode_trains_critics():
    cfg = LdmTrainConfig(steps=5, eval_every=5, batch=16, d_c_hat=1, d_s_hat=1, dm="adversarial", critic_steps=2,
                         eval_samples=20)
    init = init_ldm_bundle(3, 1, 1, 2, seed=0)
    out, trace = train_ldm(shifted_source(), cfg, bundle=init)
    assert any(a.tobytes() != b.tobytes() for a, b in zip(out.critic_arrays(), init.critic_arrays()))
    assert len(trace) == 1
