// bindings pending
