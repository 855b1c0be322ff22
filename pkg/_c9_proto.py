import time

import numpy as np

from qmpc.cli import naive_theta_structured
from qmpc.envs import make_evaporation_like_env, rollout
from qmpc.learner import LearnerConfig, MpcQFunction, train

t_all = time.time()
env = make_evaporation_like_env()
th0 = naive_theta_structured(2, 2, env.spec.x_lo, env.spec.x_hi, 1e-6,
                             x_ref=[28.0, 50.0], u_ref=[250.0, 250.0],
                             w_x=1.0, w_u=1e-4)
qfun = MpcQFunction(th0, env.model(), 10, env.spec.gamma,
                    u_lo=env.spec.u_lo, u_hi=env.spec.u_hi, W_s=1.0, w_s=100.0)
cfg = LearnerConfig(alpha=1e-2, epsilon=0.1, explore_sigma=np.sqrt(10.0), mode="batch",
                    n_upd=500, gn_max_iter=1)
t0 = time.time()
hist = train(env, qfun, 12000, cfg, np.random.default_rng(42))
t_train = time.time() - t0
roll = hist.rolling_abs_td(1000)
print(f"train {t_train/60:.1f} min; rolling_td[1000]={roll[999]:.2f} end={roll[-1]:.2f} "
      f"fails={hist.fail_pairs},{hist.fail_updates}", flush=True)

# (b) PD floor after every update
eigmins = [th0.unflatten(flat).pd_min_eig() for t, flat in hist.snapshots if t > 0]
print(f"pd eigmin over snapshots: {min(eigmins):.3e}", flush=True)

# (c)/(d) CRN evaluation: same rng seed sequence for both controllers
naive = MpcQFunction(th0, env.model(), 10, env.spec.gamma,
                     u_lo=env.spec.u_lo, u_hi=env.spec.u_hi, W_s=1.0, w_s=100.0)
cost_rl, cost_nv, viol = [], [], 0
n_eval = 0
t0 = time.time()
for ep in range(3):
    tr_n = rollout(env, lambda s: naive.v(s, warm_key="pol")[2].u0, env.init_state, 1000,
                   np.random.default_rng([7, ep]))
    tr_r = rollout(env, lambda s: qfun.v(s, warm_key="pol")[2].u0, env.init_state, 1000,
                   np.random.default_rng([7, ep]))
    cost_nv.extend(t.cost for t in tr_n)
    cost_rl.extend(t.cost for t in tr_r)
    viol += sum(1 for t in tr_r if t.s_next[0] < 25.0)
    n_eval += len(tr_r)
print(f"eval {time.time()-t0:.0f}s: naive mean cost {np.mean(cost_nv):.2f}  "
      f"rl mean cost {np.mean(cost_rl):.2f}  viol_frac {viol/n_eval:.4f}", flush=True)
print(f"total {(time.time()-t_all)/60:.1f} min", flush=True)
