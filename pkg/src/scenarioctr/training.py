"""Mini-batch training loop with per-epoch loss and AUC tracking."""

from .data import batch_iter
from .errors import ConfigError
from .metrics import auc, predict_all
from .model import train_step
from .numerics import Adam


class Trainer:
    """Owns the optimizer for one model and drives deterministic epochs.

    Batch order comes from ``batch_iter(seed, epoch)``, so two trainers built
    from identically initialized models and the same seed replay the exact
    same update stream.
    """

    def __init__(self, model, learning_rate=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.model = model
        self.optimizer = Adam(list(model.params().values()), lr=learning_rate,
                              beta1=beta1, beta2=beta2, eps=eps)

    def run_epoch(self, train, batch_size, shuffle_seed, epoch):
        """One pass over the data; returns sample-weighted mean loss terms."""
        if train.n == 0:
            raise ConfigError("cannot train on an empty dataset")
        target_sum = aux_sum = 0.0
        for batch in batch_iter(train, batch_size, shuffle_seed, epoch):
            report = train_step(self.model, batch, self.optimizer)
            target_sum += report.target_value * batch.n
            aux_sum += report.aux_value * batch.n
        return {"l_target": target_sum / train.n,
                "l_aux": aux_sum / train.n,
                "l_total": (target_sum + aux_sum) / train.n}

    def fit(self, train, epochs, batch_size, shuffle_seed=0, eval_set=None, log=None):
        """Train for ``epochs`` passes; returns one history entry per epoch.

        When ``eval_set`` is given each entry also carries that set's AUC.
        ``log`` is called with every entry as it is produced.
        """
        history = []
        for epoch in range(epochs):
            entry = {"epoch": epoch + 1}
            entry.update(self.run_epoch(train, batch_size, shuffle_seed, epoch))
            if eval_set is not None:
                entry["auc"] = auc(predict_all(self.model, eval_set), eval_set.label)
            history.append(entry)
            if log is not None:
                log(entry)
        return history
