"""Gene-expression synthesis from patches, grade/survival prediction and conformal uncertainty."""
