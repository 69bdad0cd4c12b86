#pragma once

#include "aggfunnel/batch.hpp"
#include "aggfunnel/errors.hpp"
#include "aggfunnel/faa.hpp"
#include "aggfunnel/funnel.hpp"
#include "aggfunnel/lincheck.hpp"
#include "aggfunnel/reclaim.hpp"
#include "aggfunnel/routing.hpp"
#include "aggfunnel/segqueue.hpp"
