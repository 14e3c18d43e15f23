import numpy as np
import torch

from egpssm.data import Sequence
from egpssm.kernels import kernel_matrix
from egpssm.models import ModelSpec, build_model


def set_prior_q(model):
    """q(u) = p(u) (including the model jitter) and q(x0) = p(x0)."""
    with torch.no_grad():
        Kzz = kernel_matrix(model.kernel, model.gp.Z)
        Kzz = Kzz + model.spec.jitter * torch.eye(model.gp.num_inducing, dtype=torch.float64)
        model.gp.set_variational(torch.zeros_like(model.gp.m_vec), torch.linalg.cholesky(Kzz))
        model.x0.mean.copy_(model.ssm.x0_prior_mean.expand_as(model.x0.mean))
        model.x0.logvar.copy_(torch.log(model.ssm.x0_prior_var).expand_as(model.x0.logvar))


def tiny_data(n_seq=2, T=5, d_y=2, d_c=0, seed=0):
    rng = np.random.default_rng(seed)
    return [
        Sequence(y=rng.standard_normal((T, d_y)), c=rng.standard_normal((T, d_c)), name=f"s{i}")
        for i in range(n_seq)
    ]


def tiny_model(kind="egpssm", flow="sal", d_x=2, m=3, d_c=0, n_seq=2, T=5, seed=0, perturb=0.3):
    seqs = tiny_data(n_seq, T, d_y=min(2, d_x), d_c=d_c, seed=seed)
    spec = ModelSpec(kind=kind, d_x=d_x, d_y=min(2, d_x), d_c=d_c, m=m, flow=flow, n_sequences=n_seq, kernel="matern52")
    model = build_model(spec, seqs, seed=seed)
    if perturb:
        gen = torch.Generator().manual_seed(seed + 100)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(perturb * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    return model, seqs
