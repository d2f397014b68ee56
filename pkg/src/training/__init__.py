# Optimizers, schedules, EMA and training loops
