# Augmentation, phantom volumes and dataset assembly
