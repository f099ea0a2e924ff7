"""Train a tiny localizer, evaluate it on unseen categories and query one test image."""

from mmloc.config import ExperimentConfig
from mmloc.data.synthetic import DatasetConfig, generate_dataset
from mmloc.runner import bundle_for, evaluate, localize
from mmloc.training import train

data = DatasetConfig(n_train=32, n_test=16, sketches_per_category=4)
cfg = ExperimentConfig(data=data, epochs_stage1=2, epochs_stage2=2, batch_size=4, top_n_train=30, top_n_eval=10,
                       pre_nms_top_n=200)
ds = generate_dataset(cfg.data, cfg.seed)
names = {c.id: c.name for c in ds.categories}
print("unseen categories:", [names[c] for c in ds.split.unseen])

ckpt = train(cfg, ds, callback=lambda rec: print("epoch", rec["epoch"], "loss", round(rec["total"], 3)))
print(evaluate(ckpt, "open", "ops", ds).to_text(fusion="ops"), end="")

scene = ds.test[0]
query = names[int(scene.categories[0])]
bundle = bundle_for(ckpt, query, list(ds.sketches_test[int(scene.categories[0])][:1]))
print(f"{scene.scene_id}: query {query!r}, ground truth {scene.boxes[0].round(1).tolist()}")
for sp in localize(ckpt, scene.image, bundle, top_n=3)[0]:
    print("  box", [round(float(v), 1) for v in sp.box], "score", round(sp.a, 3))
