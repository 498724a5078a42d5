"""
How a single EV answers a price pair
====================================

An EV with willingness ``w`` and wear slope ``a`` picks the energy fraction
``x`` that maximizes its utility. Below its critical charging price it charges,
below its critical discharging price it sells, and otherwise it idles.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from isat.market import BatteryModel, best_response, critical_prices, degradation_coefficient, willingness

# an EV at 40% state of charge with a 40 kWh pack
soc, cap = 0.4, 40.0
w = willingness(0.81, soc)
a = degradation_coefficient(soc, cap, BatteryModel())
ccp, cdp = critical_prices(w, a)
print(f"w={w:.3f}  a={a:.4f}  CCP={ccp:.3f}  CDP={cdp:.3f}")

# sweep the charging price with discharging locked out
p_c = np.linspace(0.05, 3.0, 300)
x_c = [best_response(w, a, p, 0.0).x for p in p_c]

# sweep the discharging price at a peak charging price
p_d = np.linspace(-12.0, 0.0, 300)
x_d = [best_response(w, a, 1.12, p).x for p in p_d]

fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
ax1.plot(p_c, x_c)
ax1.axvline(ccp, ls="--", c="gray")
ax1.set_xlabel("charging price (CNY/kWh)")
ax1.set_ylabel("x")
ax2.plot(p_d, x_d)
ax2.axvline(cdp, ls="--", c="gray")
ax2.set_xlabel("discharging price (CNY/kWh)")
fig.tight_layout()
fig.savefig("best_response.png", dpi=120)
