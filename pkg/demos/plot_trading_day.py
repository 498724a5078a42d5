"""
A trading day: V2G against uncontrolled charging
================================================

Both schemes run the packaged 12-EV fleet over the same day. Every settlement
goes through the consensus simulator and lands on the chain before wallets move.
"""

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from isat.orchestrator import UC, V2G, Scenario, charge_price_reduction_pct, run_day

sc = Scenario.load()
reports = {scheme: run_day(sc, scheme) for scheme in (V2G, UC)}

for scheme, rep in reports.items():
    print(f"{scheme:4s} charged {rep.total_charged_kwh:7.2f} kWh at {rep.avg_charge_price:.4f} "
          f"discharged {rep.total_discharged_kwh:7.2f} kWh, chain height {rep.chain_height}")
cut = charge_price_reduction_pct(reports[V2G].avg_charge_price, reports[UC].avg_charge_price)
print(f"average charging price down {cut:.2f}%")

# net energy per slot
fig, ax = plt.subplots(figsize=(9, 3.5))
for scheme, rep in reports.items():
    net = [r["charged_kwh"] - r["discharged_kwh"] for r in rep.slots]
    ax.step(range(len(net)), net, where="post", label=scheme)
ax.set_xlabel("slot (15 min)")
ax.set_ylabel("net energy (kWh)")
ax.legend()
fig.savefig("trading_day.png", dpi=120)
