"""Local energy on a trapping metric with and without damping.

A bump of initial data sits on the stable orbit. rho(T) is the local energy
norm over [0, T] divided by the initial energy norm. It levels off on flat
space and with damping on the trapped shell, and keeps growing when the shell
traps energy undamped. The script also prints the energy ledger of one damped run.
"""

from gcclab.metric import damping_shell, minkowski, shell_orbit_radii, trapped_shell
from gcclab.solver import GridSpec, bump_data, dissipation_residual, evolve, led_experiment

A, R_C, WIDTH = 8.0, 10.0, 2.5
r_s, r_u = shell_orbit_radii(A, R_C, WIDTH)
damp = damping_shell(0.5 * (r_s + r_u), 0.5 * (r_u - r_s) + 3.0, 1.0)
T_LIST = [5.0, 10.0, 20.0]

runs = {"flat": minkowski(), "damped": trapped_shell(A, R_C, WIDTH, damping=damp),
        "undamped": trapped_shell(A, R_C, WIDTH)}
rho = {}
for label, metric in runs.items():
    grid = GridSpec.for_metric(24.0, 64, metric.ellipticity_bounds[1], sponge_width=6.0)
    data = bump_data(grid, [r_s, 0.0, 0.0], 2.0)
    rows, _ = led_experiment(metric, data, T_LIST, grid, label=label)
    rho[label] = [r["rho"] for r in rows]
    print(f"{label:>9}: rho(T) = {', '.join(f'{v:.3f}' for v in rho[label])} at T = {T_LIST}")
print(f"undamped / damped at T = {T_LIST[-1]:g}: {rho['undamped'][-1] / rho['damped'][-1]:.2f}")

metric = runs["damped"]
grid = GridSpec.for_metric(12.0, 48, metric.ellipticity_bounds[1], sponge_width=3.0)
hist = evolve(metric, grid, bump_data(grid, [r_s, 0.0, 0.0], 2.0), T=4.0)
resid, ledger = dissipation_residual(metric, hist)
print(f"energy {hist.energy[0]:.3f} -> {hist.energy[-1]:.3f}; dissipated by damping "
      f"{ledger['physical_dissipated']:.3f}, by sponge {ledger['sponge_dissipated']:.3f}; "
      f"residual {resid:.2e}")
