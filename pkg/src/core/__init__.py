# Configuration, errors and the experiment runner
