// placeholder, filled in alongside its module
