"""Факторизованные тензорные поля излучения с частотной регуляризацией для обучения по малому числу видов."""

__version__ = "1.0.0"
