// Acceptance suite lands after all modules are in.
