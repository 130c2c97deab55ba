import json, time, sys
import numpy as np
from attredit.data import SynthSpec, synth_dataset
from attredit.networks import GeneratorConfig
from attredit.training import TrainConfig, train, load_models
from attredit.evaluation import train_attribute_classifier, evaluate

t0 = time.time()
spec = SynthSpec(image_size=64, seed=100, train=1024, val=128, test=256)
data = synth_dataset(spec)
print("data ready", time.time()-t0, flush=True)

cfg = TrainConfig(net=GeneratorConfig(image_size=64, attr_count=5, width_factor=0.25),
                  batch_size=16, epochs=20, n_critic=5, seed=1)
r = train(cfg, data, ".calib/runA", progress=lambda e, E, s: print(f"epoch {e}/{E} step {s} t={time.time()-t0:.0f}s", flush=True))
print("trained", time.time()-t0, flush=True)

clf, acc = train_attribute_classifier(data["train"], data["test"], seed=0)
print("judge acc", acc, time.time()-t0, flush=True)

_, gen, _, ckpt = load_models(r.final_checkpoint)
rep = evaluate(gen, clf, acc, data["test"])
print(json.dumps(rep.to_dict(), indent=1), flush=True)
print("TOTAL", time.time()-t0, flush=True)
