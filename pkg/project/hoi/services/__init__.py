# Services package for pipeline logic separation
