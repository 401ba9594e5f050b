"""A desk-sized version of the classification experiment.

Builds paired datasets (every simulated cube is rendered by both
pipelines), trains the light CNN on each and prints test confusion
matrices. With the defaults below this takes roughly 10-15 minutes on a
single core; lower PER_CLASS or EPOCHS for a quicker look.

Run:  python3 demos/03_small_experiment.py
"""

from aspc_mds import cnn
from aspc_mds import dataset as D

PER_CLASS = 60
EPOCHS = 15
SEED = 7

paired = D.generate_paired(per_class=PER_CLASS, seed=SEED)
for pipeline, ds in paired.items():
    x, y = ds.arrays("train")
    xv, yv = ds.arrays("validation")
    xt, yt = ds.arrays("test")

    def log(_model, rec, pipeline=pipeline):
        print(f"{pipeline:12s} epoch {rec['epoch']:3d}  loss {rec['train_loss']:.3f}  "
              f"val acc {rec['val_accuracy']:.3f}")

    model, _ = cnn.train(cnn.init_model(SEED), x, y, cnn.TrainConfig(epochs=EPOCHS, seed=SEED), xv, yv, log)
    cm, acc = cnn.evaluate(model, xt, yt)
    print(f"\n{pipeline} test set")
    print(D.format_confusion(cm, ds.class_names))
