namespace rapl {}
