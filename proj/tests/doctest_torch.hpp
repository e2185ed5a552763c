#pragma once

// torch's logging header defines a CHECK macro; doctest owns it in tests.
#undef CHECK
#include <doctest.h>
