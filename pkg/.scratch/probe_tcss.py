import time, json
import numpy as np
from guidegen.estimators import SemanticSynthesizer
from guidegen.phantoms import PhantomSpec, generate_case
from guidegen.metrics import tumor_alignment

spec = PhantomSpec()
train = [generate_case(spec, s) for s in range(64)]
held = [generate_case(spec, 10_000 + s) for s in range(12)]

syn = SemanticSynthesizer(steps=900, batch_size=2, lr=2e-3, beta1=0.9, seed=0)
t0 = time.time()
log = []
def cb(step, loss):
    if step % 25 == 0:
        log.append((step, loss))
        print(f"step {step} loss {loss:.4f} elapsed {time.time()-t0:.0f}s", flush=True)
syn.fit(train, on_step=cb)
print(f"fit done in {time.time()-t0:.0f}s", flush=True)

ok_c = ok_l = 0
for i, case in enumerate(held):
    res = syn.sample(case.prompt, seed=777 + i)
    c_ok, l_ok = tumor_alignment(res["tumor_mask"], res["organ_map"], case.prompt, syn.layout_)
    ok_c += c_ok; ok_l += l_ok
    print(f"prompt {i} count={case.prompt.tumor_count} locs={case.prompt.tumor_locations} -> count_ok={c_ok} loc_ok={l_ok}", flush=True)
print(f"alignment: count {ok_c}/12 loc {ok_l}/12  total {time.time()-t0:.0f}s")
