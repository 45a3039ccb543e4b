# Shared helpers: hashing, figures and slice previews
