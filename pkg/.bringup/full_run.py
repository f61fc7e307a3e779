import numpy as np, time
from csdn.head import CSDNHead, HeadConfig
from csdn.data import SceneParams, DataConfig, build_dataset
from csdn.training import DetectionLossConfig, OptimConfig, train
from csdn.evaluation import decode_detections, evaluate
from csdn.geometry import nms
from csdn.tensor import no_grad

C = 8
cfg = HeadConfig()
dcfg = DataConfig(train_scenes=512, eval_scenes=128, scene=SceneParams(num_classes=C), noise_sigma=0.03)
train_set, eval_set = build_dataset(0, dcfg, cfg.embed_dim)
head = CSDNHead(cfg, seed=0)
train_samples = [(p, b, c) for p, b, c, _ in train_set]
def eval_fn(h):
    dets, gts = [], []
    with no_grad():
        for p, b, c, _ in eval_set:
            out = h.forward(p)
            d = decode_detections(out.final.logits.data, out.final.boxes.data)
            dets.append(nms(d, 0.25, 0.6)); gts.append((b, c))
    r = evaluate(dets, gts, C)
    return {"map50": r.map50, "p": r.precision, "r": r.recall}
lcfg = DetectionLossConfig(num_classes=C)
optim = OptimConfig(lr=1e-3, batch_size=4, warmup_steps=100)
t0 = time.time()
best = [0.0]
def cb(r):
    m = r.eval_metrics
    best[0] = max(best[0], m['map50'])
    print(f"ep {r.epoch:02d} t {time.time()-t0:6.0f}s loss {r.loss.total:7.3f} map50 {m['map50']:.3f} P {m['p']:.3f} R {m['r']:.3f} best {best[0]:.3f}", flush=True)
recs = train(head, train_samples, lcfg, optim, seed=0, epochs=50, evaluate_fn=eval_fn, on_epoch=cb)
print("DONE best", best[0], "in", round(time.time()-t0,1), "s")
