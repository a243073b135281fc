# Test package for derms
