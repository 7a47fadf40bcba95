from dataclasses import dataclass

from few_tensorf.config import RunConfig
from few_tensorf.tensorf_pipeline.field import RadianceField, build_field
from few_tensorf.training.optimizer import AdamOptimizer


@dataclass
class TrainState:
    """Состояние обучения: модель, моменты Adam, номер итерации и конфигурация запуска"""
    field: RadianceField
    optimizer: AdamOptimizer
    config: RunConfig
    t: int = 0

    @classmethod
    def initial(cls, config: RunConfig) -> "TrainState":
        trainer = config.trainer
        return cls(build_field(config.model, config.seed), AdamOptimizer(trainer.betas, trainer.eps), config)

    def check_moments(self) -> None:
        """Проверяет, что буферы моментов совпадают по форме с параметрами"""
        params = self.field.parameters()
        for name, moments in self.optimizer.moments.items():
            if name not in params or moments.m.shape != params[name].shape or moments.v.shape != params[name].shape:
                raise ValueError(f"Моменты Adam для {name} не соответствуют параметру")
