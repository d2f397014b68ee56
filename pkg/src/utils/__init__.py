# Logging, helpers and plotting
