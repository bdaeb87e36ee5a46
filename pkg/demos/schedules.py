"""
Distillation schedules
======================

tau(t) anneals the softmax over sibling advantages from soft to argmax;
lambda(t) ramps the distillation weight up along an exponential.  The
reverse-schedule ablation runs both backwards.
"""

from treerpo.objective import ScheduleConfig, lambda_schedule, tau_schedule

fwd = ScheduleConfig(T=100)
rev = ScheduleConfig(T=100, reverse=True)
print(f"{'t':>4} {'tau':>7} {'lambda':>10} | {'tau rev':>7} {'lambda rev':>10}")
for t in range(0, 101, 10):
    print(f"{t:>4} {tau_schedule(t, fwd):7.3f} {lambda_schedule(t, fwd):10.2e} | "
          f"{tau_schedule(t, rev):7.3f} {lambda_schedule(t, rev):10.2e}")
