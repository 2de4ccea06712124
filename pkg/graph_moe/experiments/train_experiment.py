from graph_moe.experiments.experiment import TrainingExperiment


class TrainExperiment(TrainingExperiment):
    command = "train"

    def execute(self) -> bool:
        self.train_variant(self.cfg, self.out_dir)
        return True
