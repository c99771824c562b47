import time, json
import numpy as np
from guidegen.estimators import SemanticSynthesizer
from guidegen.phantoms import PhantomSpec, generate_case
from guidegen.metrics import tumor_alignment

spec = PhantomSpec()
train = [generate_case(spec, s) for s in range(96)]
held = [generate_case(spec, 10_000 + s) for s in range(12)]

syn = SemanticSynthesizer(steps=3000, batch_size=2, lr=2e-3, beta1=0.9, seed=0)
t0 = time.time()

def probe(tag):
    ok_c = ok_l = 0
    details = []
    for i, case in enumerate(held):
        res = syn.sample(case.prompt, seed=777 + i)
        c_ok, l_ok = tumor_alignment(res["tumor_mask"], res["organ_map"], case.prompt, syn.layout_)
        ok_c += c_ok; ok_l += l_ok
        from guidegen.phantoms import tumor_components
        _, n = tumor_components(res["tumor_mask"])
        details.append(f"want={case.prompt.tumor_count}@{','.join(case.prompt.tumor_locations)} got_n={n} c={int(c_ok)} l={int(l_ok)}")
    print(f"[{tag}] count {ok_c}/12 loc {ok_l}/12 | " + " | ".join(details[:6]), flush=True)

def cb(step, loss):
    if step % 100 == 0:
        print(f"step {step} loss {loss:.4f} elapsed {time.time()-t0:.0f}s", flush=True)
    if step % 600 == 0:
        t = time.time()
        probe(f"step{step}")
        print(f"probe took {time.time()-t:.0f}s", flush=True)

probe("untrained-check-skip") if False else None
syn.fit(train, on_step=cb)
print(f"fit done {time.time()-t0:.0f}s", flush=True)
probe("final")
syn.save_checkpoint(".scratch/probe2_tcss.ggckpt")
print("saved")
