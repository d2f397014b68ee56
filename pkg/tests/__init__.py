# Tests for the Swin CT toolkit
