"""Build an escape function and tune it until the positivity estimate holds.

The symbol q combines a flow-integrated term near the damping, an interior term
that integrates a bump along non-trapped rays and an exterior radial multiplier
weighted by the bootstrap function f. The tuning loop searches (lambda, sigma,
gamma, epsilon) and reports the smallest normalized value c0 of
H_p q + 2 gamma tau a q + m p on a phase-space sample.
"""

from gcclab import escape as E
from gcclab.config import parse_config
from gcclab.halfwave import b_scale_bounds
from gcclab.runner import build_escape

cfg = parse_config({
    "name": "demo_escape",
    "metric": {"name": "trapped_shell", "params": {"A": 2.0, "r_c": 5.0, "width": 1.0}},
    "damping": {"kind": "shell", "params": {"radius": 3.75, "half_width": 2.5, "amplitude": 1.0}},
    "escape": {"j_max": 8, "samples_per_annulus": 500, "trapped_seeds": 32, "gcc_T_max": 100.0,
               "n_probes": 256, "n_generic": 4000, "n_char": 400,
               "lambdas": [4.0], "sigmas": [4.0], "gammas": [16.0]},
})
spec = cfg.escape

asm, af, R, seeds = build_escape(cfg)
print(f"asymptotic flatness: R0 = {af.R0:g}, c_j = {[f'{c:.2g}' for c in af.c_seq[:4]]} ...")
for sg, info in seeds.items():
    print(f"sign {sg}: {info['trapped']} of {info['seeds']} shell seeds trapped, shell {info['detected_shell']}")

_, C_b = b_scale_bounds(asm.metric, 8.0 * R)
samples = E.sample_phase_space(asm.metric, E.SampleSpec(R=R, n_generic=spec.n_generic,
                                                        n_char=spec.n_char, C_b=C_b))
cache = E.cache_components(asm.symbols, samples)
res = E.tune_escape(cache, spec.lambdas, spec.sigmas, spec.gammas, spec.eps_start, spec.eps_min,
                    spec.C_target)
for t in res.trials:
    print(f"  epsilon {t['epsilon']:.3g}: c0 {t['c0']:.3g}, validity {t['validity']:.3f}")
rep = res.report
print(f"passed: {res.passed} with {res.params}")
print(f"c0 = {rep.c0:.3g}, 1% quantile {rep.quantile_1pct:.3g}, correction validity {rep.validity_fraction:.0%}")
