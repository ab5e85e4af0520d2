# Rydberg transfer package
