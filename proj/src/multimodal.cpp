#include "gw/common.hpp"
