# Volume ingestion, nodule cropping and slicing
