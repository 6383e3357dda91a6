"""Monte Carlo toolkit for partially observed mean-field jump-diffusion
control: forward simulation under Girsanov reweighting, two adjoint engines
(pathwise stochastic derivatives and backward-equation regression), and
linear-quadratic solvers validated against independent oracles."""

__version__ = "0.1.0"
